import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from detector import forward
from errors import PreconditionError
from logging_manager import get_logger
from tensor_ops import Tensor
from weights_manager import Model

logger = get_logger('benchmark')


@dataclass(frozen=True)
class BenchmarkResult:
    name: str
    input_size: int
    fps: float
    latencies: Tuple[float, ...]

    @property
    def min_latency(self) -> float:
        return min(self.latencies)

    @property
    def median_latency(self) -> float:
        return float(np.median(self.latencies))

    @property
    def max_latency(self) -> float:
        return max(self.latencies)

    @property
    def mean_latency(self) -> float:
        return float(np.mean(self.latencies))

    def to_csv(self) -> str:
        lines = ['model,input_size,run,latency_ms']
        lines += [f'{self.name},{self.input_size},{i},{latency * 1000:.4f}'
                  for i, latency in enumerate(self.latencies)]
        lines.append(f'{self.name},{self.input_size},fps,{self.fps:.4f}')
        lines.append(f'{self.name},{self.input_size},min_ms,{self.min_latency * 1000:.4f}')
        lines.append(f'{self.name},{self.input_size},median_ms,{self.median_latency * 1000:.4f}')
        lines.append(f'{self.name},{self.input_size},max_ms,{self.max_latency * 1000:.4f}')
        return '\n'.join(lines) + '\n'


def resize_model(model: Model, input_size: int) -> Model:
    """Same weights on a network with a different square input."""
    if input_size == model.config.input_size:
        return model
    return Model(model.config.with_input_size(input_size), model.kernels, model.seen)


def benchmark_fps(model: Model, input_size: int, warmup: int = 2, runs: int = 10, threads: int = 1,
                  seed: int = 42) -> BenchmarkResult:
    """Time forward passes on a fixed random input; FPS = runs / total elapsed."""
    if runs < 3:
        raise PreconditionError(f"Benchmark needs at least 3 timed runs, got {runs}")
    if warmup < 0 or threads < 1:
        raise PreconditionError(f"Invalid warmup {warmup} / threads {threads}")
    model = resize_model(model, input_size)
    c, h, w = model.config.input_shape
    rng = np.random.default_rng(seed)
    input = Tensor(c, h, w, rng.uniform(0.0, 1.0, c * h * w).astype(np.float32))
    model.inference_kernels()

    executor = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        for _ in range(warmup):
            forward(model, input, threads, executor)
        latencies = []
        for _ in range(runs):
            start = time.perf_counter()
            forward(model, input, threads, executor)
            latencies.append(time.perf_counter() - start)
    finally:
        if executor is not None:
            executor.shutdown()

    result = BenchmarkResult(model.config.name, input_size, runs / sum(latencies), tuple(latencies))
    logger.info(f"Benchmark {result.name}@{input_size}: {result.fps:.2f} FPS "
                f"(median {result.median_latency * 1000:.2f} ms)")
    return result
