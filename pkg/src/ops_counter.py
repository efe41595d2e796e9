from dataclasses import dataclass
from typing import List, Tuple

from network_config import Convolutional, MaxPool, NetInput, NetworkConfig


@dataclass(frozen=True)
class LayerOps:
    index: int
    kind: str
    output_shape: Tuple[int, int, int]
    macs: int
    parameters: int


@dataclass(frozen=True)
class OpsReport:
    name: str
    input_size: int
    layers: Tuple[LayerOps, ...]

    @property
    def total_macs(self) -> int:
        return sum(layer.macs for layer in self.layers)

    @property
    def total_parameters(self) -> int:
        return sum(layer.parameters for layer in self.layers)

    def to_csv(self) -> str:
        lines = ['layer,type,output_shape,macs,parameters']
        for layer in self.layers:
            shape = 'x'.join(str(d) for d in layer.output_shape)
            lines.append(f'{layer.index},{layer.kind},{shape},{layer.macs},{layer.parameters}')
        lines.append(f'total,,,{self.total_macs},{self.total_parameters}')
        return '\n'.join(lines) + '\n'


def count_ops(config: NetworkConfig) -> OpsReport:
    """Analytic multiply-accumulate and parameter counts per layer."""
    layers: List[LayerOps] = []
    for index, layer in enumerate(config.layers):
        shape = config.shapes[index]
        if isinstance(layer, NetInput):
            continue
        if isinstance(layer, Convolutional):
            in_channels = config.shapes[index - 1][0]
            k2 = layer.size * layer.size
            out_c, out_h, out_w = shape
            macs = k2 * in_channels * out_c * out_h * out_w
            params = out_c * (in_channels * k2 + 1)
            if layer.batch_normalize:
                params += 3 * out_c
            layers.append(LayerOps(index, 'conv', shape, macs, params))
        elif isinstance(layer, MaxPool):
            layers.append(LayerOps(index, 'maxpool', shape, 0, 0))
        else:
            layers.append(LayerOps(index, 'region', shape, 0, 0))
    return OpsReport(config.name, config.input_size, tuple(layers))
