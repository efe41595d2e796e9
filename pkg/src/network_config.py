"""
Network configuration files: an INI-like layer list in the darknet style.

    [net]            width, height, channels
    [convolutional]  filters, size (1 or 3), stride, pad (flag: padding = size // 2),
                     batch_normalize (0/1), activation (leaky | linear)
    [maxpool]        size, stride
    [region]         anchors (comma-separated w,h pairs in grid cells), num, classes

Lines starting with '#' or ';' are comments, as is anything after '#'.
"""
import os
from dataclasses import dataclass, replace, field
from typing import Dict, List, Optional, Tuple, Union

from errors import ConfigurationError
from logging_manager import get_logger
from tensor_ops import conv_output_size, pool_output_size

logger = get_logger('network_config')

CFG_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), '..', 'cfg')
REFERENCE_MODELS = ('dronet', 'tiny_yolo_voc', 'tiny_yolonet', 'small_yolo_v3')

Shape = Tuple[int, int, int]


@dataclass(frozen=True)
class NetInput:
    width: int
    height: int
    channels: int


@dataclass(frozen=True)
class Convolutional:
    filters: int
    size: int
    stride: int = 1
    pad: int = 1
    batch_normalize: bool = False
    activation: str = 'leaky'

    @property
    def padding(self) -> int:
        return self.size // 2 if self.pad else 0


@dataclass(frozen=True)
class MaxPool:
    size: int = 2
    stride: int = 2


@dataclass(frozen=True)
class Region:
    anchors: Tuple[Tuple[float, float], ...]
    num_anchors: int
    classes: int

    @property
    def entries(self) -> int:
        return 5 + self.classes


LayerSpec = Union[NetInput, Convolutional, MaxPool, Region]

SECTION_NAMES = {
    'net': NetInput, 'network': NetInput,
    'convolutional': Convolutional, 'conv': Convolutional,
    'maxpool': MaxPool, 'max': MaxPool,
    'region': Region,
}
KNOWN_KEYS = {
    NetInput: {'width', 'height', 'channels'},
    Convolutional: {'filters', 'size', 'stride', 'pad', 'batch_normalize', 'activation'},
    MaxPool: {'size', 'stride'},
    Region: {'anchors', 'num', 'classes'},
}
ACTIVATIONS = ('leaky', 'linear')


@dataclass(frozen=True)
class NetworkConfig:
    name: str
    layers: Tuple[LayerSpec, ...]
    shapes: Tuple[Shape, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, 'layers', tuple(self.layers))
        object.__setattr__(self, 'shapes', tuple(propagate_shapes(self.layers)))

    @property
    def net(self) -> NetInput:
        return self.layers[0]

    @property
    def region(self) -> Region:
        return self.layers[-1]

    @property
    def input_size(self) -> int:
        return self.net.width

    @property
    def input_shape(self) -> Shape:
        return (self.net.channels, self.net.height, self.net.width)

    @property
    def output_shape(self) -> Shape:
        """Shape of the prediction map handed to region decoding."""
        return self.shapes[-1]

    @property
    def grid_size(self) -> int:
        return self.output_shape[1]

    def conv_layers(self) -> List[Tuple[int, Convolutional]]:
        return [(i, layer) for i, layer in enumerate(self.layers) if isinstance(layer, Convolutional)]

    def with_input_size(self, size: int) -> 'NetworkConfig':
        net = replace(self.net, width=size, height=size)
        return NetworkConfig(self.name, (net,) + self.layers[1:])

    def without_batch_norm(self) -> 'NetworkConfig':
        layers = tuple(replace(layer, batch_normalize=False) if isinstance(layer, Convolutional) else layer
                       for layer in self.layers)
        return NetworkConfig(self.name, layers)


def propagate_shapes(layers) -> List[Shape]:
    """Validate a layer list and return the output shape of every layer."""
    if not layers or not isinstance(layers[0], NetInput):
        raise ConfigurationError("Network configuration must start with a [net] section")
    if not isinstance(layers[-1], Region):
        raise ConfigurationError("Network configuration must end with a [region] section")

    net = layers[0]
    if min(net.width, net.height, net.channels) < 1:
        raise ConfigurationError(f"Invalid network input {net.width}x{net.height}x{net.channels}")
    shape = (net.channels, net.height, net.width)
    shapes = [shape]
    last_conv: Optional[Convolutional] = None

    for index, layer in enumerate(layers[1:], start=1):
        c, h, w = shape
        if isinstance(layer, NetInput):
            raise ConfigurationError(f"Layer {index}: [net] may only appear first")
        elif isinstance(layer, Convolutional):
            if layer.size not in (1, 3):
                raise ConfigurationError(f"Layer {index}: convolution size must be 1 or 3, got {layer.size}")
            if layer.stride < 1 or layer.filters < 1:
                raise ConfigurationError(f"Layer {index}: invalid filters/stride")
            if layer.activation not in ACTIVATIONS:
                raise ConfigurationError(f"Layer {index}: unknown activation '{layer.activation}'")
            try:
                h = conv_output_size(h, layer.size, layer.stride, layer.padding)
                w = conv_output_size(w, layer.size, layer.stride, layer.padding)
            except ConfigurationError as e:
                raise ConfigurationError(f"Layer {index}: shape underflow: {e}")
            shape = (layer.filters, h, w)
            last_conv = layer
        elif isinstance(layer, MaxPool):
            if layer.size < 1 or layer.stride < 1:
                raise ConfigurationError(f"Layer {index}: invalid pool size/stride")
            if h < layer.size or w < layer.size:
                raise ConfigurationError(
                    f"Layer {index}: shape underflow: {h}x{w} map is smaller than the "
                    f"{layer.size}x{layer.size} pool window (too many pools for the input size)")
            shape = (c, pool_output_size(h, layer.stride), pool_output_size(w, layer.stride))
        elif isinstance(layer, Region):
            if index != len(layers) - 1:
                raise ConfigurationError(f"Layer {index}: [region] must be the last section")
            if layer.num_anchors < 1 or layer.classes < 1:
                raise ConfigurationError("Region needs at least one anchor and one class")
            if len(layer.anchors) != layer.num_anchors:
                raise ConfigurationError(
                    f"Region declares num={layer.num_anchors} but lists {len(layer.anchors)} anchors")
            if any(aw <= 0 or ah <= 0 for aw, ah in layer.anchors):
                raise ConfigurationError("Anchor dimensions must be positive")
            expected = layer.num_anchors * layer.entries
            if last_conv is None or c != expected:
                raise ConfigurationError(
                    f"Final convolution has {c} filters; region needs "
                    f"{layer.num_anchors}x(5+{layer.classes})={expected}")
        shapes.append(shape)

    return shapes


def _parse_int(value: str, section: str, key: str, line_no: int) -> int:
    try:
        return int(value)
    except ValueError:
        raise ConfigurationError(f"Line {line_no}: [{section}] {key} expects an integer, got '{value}'")


def _parse_anchors(value: str, line_no: int) -> Tuple[Tuple[float, float], ...]:
    try:
        numbers = [float(v) for v in value.split(',') if v.strip()]
    except ValueError:
        raise ConfigurationError(f"Line {line_no}: anchors must be comma-separated floats")
    if len(numbers) % 2:
        raise ConfigurationError(f"Line {line_no}: anchors must come in (w, h) pairs")
    return tuple((numbers[i], numbers[i + 1]) for i in range(0, len(numbers), 2))


def _build_layer(kind, options: Dict[str, Tuple[str, int]], section: str, start_line: int) -> LayerSpec:
    for key in options:
        if key not in KNOWN_KEYS[kind]:
            logger.warning(f"Line {options[key][1]}: unknown key '{key}' in [{section}] ignored")

    def integer(key, default=None):
        if key not in options:
            if default is None:
                raise ConfigurationError(f"Line {start_line}: [{section}] is missing '{key}'")
            return default
        value, line_no = options[key]
        return _parse_int(value, section, key, line_no)

    if kind is NetInput:
        return NetInput(width=integer('width'), height=integer('height'), channels=integer('channels', 3))
    if kind is Convolutional:
        return Convolutional(
            filters=integer('filters'),
            size=integer('size', 1),
            stride=integer('stride', 1),
            pad=integer('pad', 0),
            batch_normalize=bool(integer('batch_normalize', 0)),
            activation=options.get('activation', ('leaky', 0))[0].strip().lower(),
        )
    if kind is MaxPool:
        size = integer('size', 2)
        return MaxPool(size=size, stride=integer('stride', size))
    anchors = _parse_anchors(*options['anchors']) if 'anchors' in options else ()
    return Region(anchors=anchors, num_anchors=integer('num', len(anchors) or 1), classes=integer('classes', 1))


def parse_config(text: str, name: str = 'network') -> NetworkConfig:
    """Parse configuration text into a validated, shape-propagated NetworkConfig."""
    sections: List[Tuple[type, str, int, Dict[str, Tuple[str, int]]]] = []

    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split('#', 1)[0].strip()
        if not line or line.startswith(';'):
            continue
        if line.startswith('['):
            if not line.endswith(']'):
                raise ConfigurationError(f"Line {line_no}: malformed section header '{line}'")
            section = line[1:-1].strip().lower()
            if section not in SECTION_NAMES:
                raise ConfigurationError(f"Line {line_no}: unknown section [{section}]")
            sections.append((SECTION_NAMES[section], section, line_no, {}))
            continue
        if '=' not in line:
            raise ConfigurationError(f"Line {line_no}: expected key=value, got '{line}'")
        if not sections:
            raise ConfigurationError(f"Line {line_no}: key=value before any section")
        key, value = line.split('=', 1)
        sections[-1][3][key.strip().lower()] = (value.strip(), line_no)

    if not sections or sections[0][0] is not NetInput:
        raise ConfigurationError("Missing [net] section at the start of the configuration")

    layers = [_build_layer(kind, options, section, line_no) for kind, section, line_no, options in sections]
    return NetworkConfig(name, tuple(layers))


def _format_float(value: float) -> str:
    return repr(float(value))


def serialize_config(config: NetworkConfig) -> str:
    """Canonical text form; parsing it gives back an equal configuration."""
    blocks = []
    for layer in config.layers:
        if isinstance(layer, NetInput):
            lines = ['[net]', f'width={layer.width}', f'height={layer.height}', f'channels={layer.channels}']
        elif isinstance(layer, Convolutional):
            lines = ['[convolutional]', f'batch_normalize={int(layer.batch_normalize)}',
                     f'filters={layer.filters}', f'size={layer.size}', f'stride={layer.stride}',
                     f'pad={layer.pad}', f'activation={layer.activation}']
        elif isinstance(layer, MaxPool):
            lines = ['[maxpool]', f'size={layer.size}', f'stride={layer.stride}']
        else:
            anchors = ', '.join(f'{_format_float(w)},{_format_float(h)}' for w, h in layer.anchors)
            lines = ['[region]', f'anchors={anchors}', f'classes={layer.classes}', f'num={layer.num_anchors}']
        blocks.append('\n'.join(lines))
    return '\n\n'.join(blocks) + '\n'


def read_config(path: str) -> NetworkConfig:
    if not os.path.exists(path):
        raise ConfigurationError(f"Network configuration not found: {path}")
    with open(path, 'r', encoding='utf-8') as file:
        text = file.read()
    name = os.path.splitext(os.path.basename(path))[0]
    return parse_config(text, name)


def reference_configs() -> Dict[str, NetworkConfig]:
    """The four reference architectures shipped as text assets under cfg/."""
    return {name: read_config(os.path.join(CFG_DIR, f'{name}.cfg')) for name in REFERENCE_MODELS}


def resolve_config(name_or_path: str, input_size: Optional[int] = None) -> NetworkConfig:
    """Load a reference model by name or a configuration file by path."""
    if name_or_path in REFERENCE_MODELS:
        config = read_config(os.path.join(CFG_DIR, f'{name_or_path}.cfg'))
    else:
        config = read_config(name_or_path)
    if input_size is not None and input_size != config.input_size:
        config = config.with_input_size(input_size)
    return config
