"""
Design-space sweep: every (model, input size) pair is evaluated and
benchmarked, each metric column is divided by its maximum, and the rows are
ranked by a weighted sum of the normalized metrics.
"""
import csv
import io
import json
import os
from dataclasses import dataclass, field, fields, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import yaml

from benchmark import benchmark_fps
from dataset_processor import load_annotations
from detector import DetectParams
from errors import ConfigurationError, DetectorError, PreconditionError
from evaluation import EvalReport, evaluate_dataset
from logging_manager import get_logger
from network_config import NetworkConfig, resolve_config
from weights_manager import Model, init_random_weights, read_weights_file

logger = get_logger('explorer')

METRICS = ('fps', 'mean_iou', 'sensitivity', 'precision')
NORMALIZED = ('fps_n', 'iou_n', 'sens_n', 'prec_n')
CSV_HEADER = ('model', 'input_size', 'fps', 'iou', 'sensitivity', 'precision',
              'fps_n', 'iou_n', 'sens_n', 'prec_n', 'score', 'selected')
MIN_SIZE, MAX_SIZE = 352, 608


@dataclass(frozen=True)
class ScoreWeights:
    """Weights of FPS, IoU, sensitivity and precision."""
    w1: float = 0.4
    w2: float = 0.2
    w3: float = 0.2
    w4: float = 0.2

    def __post_init__(self):
        values = self.as_tuple()
        if any(not 0.0 <= w <= 1.0 for w in values):
            raise PreconditionError(f"Score weights must each lie in [0, 1], got {values}")
        if abs(sum(values) - 1.0) > 1e-9:
            raise PreconditionError(f"Score weights must sum to 1, got {sum(values)}")

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.w1, self.w2, self.w3, self.w4)


@dataclass(frozen=True)
class MetricRow:
    model: str
    input_size: int
    fps: float
    mean_iou: Optional[float]
    sensitivity: Optional[float]
    precision: Optional[float]
    fps_n: Optional[float] = None
    iou_n: Optional[float] = None
    sens_n: Optional[float] = None
    prec_n: Optional[float] = None
    score: Optional[float] = None
    selected: bool = False

    @property
    def normalized(self) -> Tuple[Optional[float], ...]:
        return (self.fps_n, self.iou_n, self.sens_n, self.prec_n)


@dataclass(frozen=True)
class SweepConfig:
    models: Tuple[str, ...]
    sizes: Tuple[int, ...] = (352, 416, 480, 544, 608)
    weights: ScoreWeights = ScoreWeights()
    warmup: int = 1
    runs: int = 3
    threads: int = 1
    seed: int = 42
    dataset: Optional[str] = None
    conf_threshold: float = 0.25
    nms_iou_threshold: float = 0.45
    iou_match_threshold: float = 0.5
    weight_files: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, 'models', tuple(self.models))
        object.__setattr__(self, 'sizes', tuple(int(s) for s in self.sizes))
        if not self.models:
            raise ConfigurationError("Sweep needs at least one model")
        if not self.sizes:
            raise ConfigurationError("Sweep needs at least one input size")
        for size in self.sizes:
            if size % 32 or not MIN_SIZE <= size <= MAX_SIZE:
                raise ConfigurationError(
                    f"Sweep size {size} must be a multiple of 32 within [{MIN_SIZE}, {MAX_SIZE}]")
        if self.runs < 3:
            raise ConfigurationError(f"Sweep needs at least 3 benchmark runs, got {self.runs}")
        if self.warmup < 0 or self.threads < 1:
            raise ConfigurationError("Sweep warmup must be >= 0 and threads >= 1")

    @classmethod
    def from_dict(cls, data: dict, base_dir: str = '.') -> 'SweepConfig':
        data = dict(data)
        known = {f.name for f in fields(cls)}
        for key in list(data):
            if key not in known:
                logger.warning(f"Unknown sweep key '{key}' ignored")
                data.pop(key)
        if 'weights' in data and not isinstance(data['weights'], ScoreWeights):
            data['weights'] = ScoreWeights(*(float(w) for w in data['weights']))
        if data.get('dataset') and not os.path.isabs(data['dataset']):
            data['dataset'] = os.path.join(base_dir, data['dataset'])
        data['weight_files'] = {name: path if os.path.isabs(path) else os.path.join(base_dir, path)
                                for name, path in (data.get('weight_files') or {}).items()}
        if 'models' not in data:
            raise ConfigurationError("Sweep configuration is missing 'models'")
        return cls(**data)

    @classmethod
    def from_yaml(cls, path: str) -> 'SweepConfig':
        """Load a sweep file; relative paths resolve against the working directory."""
        if not os.path.exists(path):
            raise ConfigurationError(f"Sweep configuration not found: {path}")
        try:
            with open(path, 'r', encoding='utf-8') as file:
                data = yaml.safe_load(file) or {}
        except yaml.YAMLError as e:
            raise ConfigurationError(f"Invalid sweep configuration {path}: {e}")
        if not isinstance(data, dict):
            raise ConfigurationError(f"Sweep configuration {path} must contain a mapping")
        return cls.from_dict(data)

    def with_overrides(self, **overrides) -> 'SweepConfig':
        """Command-line values win over the file; None means not given."""
        return replace(self, **{k: v for k, v in overrides.items() if v is not None})


@dataclass(frozen=True)
class ReportTable:
    rows: Tuple[MetricRow, ...]
    skipped: Tuple[Tuple[str, int, str], ...] = ()

    @property
    def selected(self) -> Optional[MetricRow]:
        return next((row for row in self.rows if row.selected), None)


def normalize_metrics(rows: Sequence[MetricRow]) -> List[MetricRow]:
    """Divide each metric column by its maximum; undefined values count as 0."""
    if not rows:
        raise PreconditionError("normalize_metrics needs at least one row")
    columns = {}
    for metric in METRICS:
        values = []
        for row in rows:
            value = getattr(row, metric)
            if value is None:
                logger.warning(f"{row.model}@{row.input_size}: {metric} undefined, normalized as 0")
                value = 0.0
            if value < 0:
                raise PreconditionError(f"{row.model}@{row.input_size}: negative {metric} {value}")
            values.append(value)
        peak = max(values)
        if peak <= 0:
            logger.warning(f"Column {metric} is zero for every row; normalized as 0")
            columns[metric] = [0.0] * len(values)
        else:
            columns[metric] = [v / peak for v in values]
    return [replace(row, **{name: columns[metric][i] for metric, name in zip(METRICS, NORMALIZED)})
            for i, row in enumerate(rows)]


def score(row: MetricRow, weights: ScoreWeights = ScoreWeights()) -> float:
    normalized = row.normalized
    if any(v is None or not 0.0 <= v <= 1.0 for v in normalized):
        raise PreconditionError(f"{row.model}@{row.input_size}: row is not normalized {normalized}")
    return sum(w * v for w, v in zip(weights.as_tuple(), normalized))


def rank_rows(rows: Sequence[MetricRow], weights: ScoreWeights) -> List[MetricRow]:
    """Normalize, score and sort descending; ties keep declaration order."""
    if not rows:
        return []
    scored = [replace(row, score=score(row, weights), selected=False) for row in normalize_metrics(rows)]
    ranked = sorted(scored, key=lambda row: -row.score)
    ranked[0] = replace(ranked[0], selected=True)
    return ranked


def load_sweep_model(cfg: SweepConfig, config: NetworkConfig) -> Model:
    path = cfg.weight_files.get(config.name)
    if path:
        return read_weights_file(path, config)
    return init_random_weights(config, seed=cfg.seed)


EvaluateFn = Callable[[Model], EvalReport]
BenchmarkFn = Callable[[Model], float]
ProgressFn = Callable[[int, int, str], None]


def run_sweep(cfg: SweepConfig, evaluate_fn: Optional[EvaluateFn] = None,
              benchmark_fn: Optional[BenchmarkFn] = None, progress: Optional[ProgressFn] = None) -> ReportTable:
    """Evaluate and benchmark every (model, size) pair, then rank by weighted score.

    Pairs are processed one at a time so timed sections never overlap. Pairs
    that fail to build are skipped and listed in the table.
    """
    if evaluate_fn is None:
        if not cfg.dataset:
            raise ConfigurationError("Sweep needs a dataset list file")
        gts = load_annotations(cfg.dataset)
        params = DetectParams(cfg.conf_threshold, cfg.nms_iou_threshold)

        def evaluate_fn(model: Model) -> EvalReport:
            return evaluate_dataset(model, gts, params, cfg.iou_match_threshold)

    if benchmark_fn is None:
        def benchmark_fn(model: Model) -> float:
            return benchmark_fps(model, model.config.input_size, cfg.warmup, cfg.runs,
                                 cfg.threads, cfg.seed).fps

    rows = []
    skipped = []
    total = len(cfg.models) * len(cfg.sizes)
    for name in cfg.models:
        for size in cfg.sizes:
            try:
                config = resolve_config(name, size)
                model = load_sweep_model(cfg, config)
                report = evaluate_fn(model)
                fps = benchmark_fn(model)
            except DetectorError as e:
                skipped.append((name, size, str(e)))
                continue
            rows.append(MetricRow(name, size, fps, report.mean_iou, report.sensitivity, report.precision))
            if progress is not None:
                progress(len(rows) + len(skipped), total, f"{name}@{size} fps={fps:.2f}")

    return ReportTable(tuple(rank_rows(rows, cfg.weights)), tuple(skipped))


def best_per_model(table: ReportTable) -> List[MetricRow]:
    """Highest-scoring input size of each model, in rank order."""
    best: Dict[str, MetricRow] = {}
    for row in table.rows:
        if row.model not in best:
            best[row.model] = row
    return list(best.values())


def relative_speedup(table: ReportTable, baseline: str) -> Dict[str, float]:
    """FPS of each model's best row divided by the baseline model's best-row FPS."""
    best = {row.model: row for row in best_per_model(table)}
    if baseline not in best:
        raise PreconditionError(f"Baseline model '{baseline}' is not in the report")
    reference = best[baseline].fps
    if reference <= 0:
        raise PreconditionError(f"Baseline model '{baseline}' has no positive FPS")
    return {name: row.fps / reference for name, row in best.items()}


def _fmt(value: Optional[float]) -> str:
    return 'n/a' if value is None else f'{value:.4f}'


def _row_values(row: MetricRow) -> dict:
    return {
        'model': row.model,
        'input_size': row.input_size,
        'fps': row.fps,
        'iou': row.mean_iou,
        'sensitivity': row.sensitivity,
        'precision': row.precision,
        'fps_n': row.fps_n,
        'iou_n': row.iou_n,
        'sens_n': row.sens_n,
        'prec_n': row.prec_n,
        'score': row.score,
        'selected': row.selected,
    }


def emit_report(table: ReportTable, format: str = 'csv', baseline: Optional[str] = None) -> bytes:
    if format == 'csv':
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator='\n')
        writer.writerow(CSV_HEADER)
        for row in table.rows:
            values = _row_values(row)
            writer.writerow([values['model'], values['input_size']]
                            + [_fmt(values[key]) for key in CSV_HEADER[2:-1]]
                            + ['true' if row.selected else 'false'])
        return buffer.getvalue().encode('utf-8')

    if format == 'json':
        def rounded(value):
            return round(value, 4) if isinstance(value, float) else value

        document = {
            'rows': [{key: rounded(value) for key, value in _row_values(row).items()} for row in table.rows],
            'skipped': [{'model': m, 'input_size': s, 'reason': r} for m, s, r in table.skipped],
        }
        return (json.dumps(document, indent=2) + '\n').encode('utf-8')

    if format == 'text':
        lines = [f"{'model':<16}{'size':>6}{'fps':>10}{'iou':>9}{'sens':>9}{'prec':>9}{'score':>9}"]
        for row in table.rows:
            mark = '  <- selected' if row.selected else ''
            lines.append(f'{row.model:<16}{row.input_size:>6}{row.fps:>10.2f}{_fmt(row.mean_iou):>9}'
                         f'{_fmt(row.sensitivity):>9}{_fmt(row.precision):>9}{_fmt(row.score):>9}{mark}')
        if table.rows:
            lines.append('')
            lines.append('best size per model:')
            for row in best_per_model(table):
                lines.append(f'  {row.model:<16}{row.input_size:>6}  score {_fmt(row.score)}')
        if baseline and any(row.model == baseline for row in table.rows):
            lines.append('')
            lines.append(f'speedup vs {baseline} (best sizes):')
            for name, ratio in relative_speedup(table, baseline).items():
                lines.append(f'  {name:<16}{ratio:>8.2f}x')
        for model, size, reason in table.skipped:
            lines.append(f'skipped {model}@{size}: {reason}')
        return ('\n'.join(lines) + '\n').encode('utf-8')

    raise PreconditionError(f"Unknown report format '{format}'")
