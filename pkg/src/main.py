import argparse
import os
import sys
from typing import List, Optional

import numpy as np

# Add src directory to path
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from backprop import random_trainable
from benchmark import benchmark_fps
from config_manager import ConfigManager
from dataset_processor import (GroundTruthBox, generate_synthetic_dataset, load_annotations, read_annotation,
                               summarize_dataset)
from detector import BBox, DetectParams, detect, format_detections, iou
from errors import ConfigurationError, DetectorError
from evaluation import evaluate_dataset
from explorer import ScoreWeights, SweepConfig, emit_report, run_sweep
from image_io import draw_detections, read_ppm, write_ppm
from logging_manager import LoggingManager
from network_config import resolve_config
from ops_counter import count_ops
from trainer import (GRADCHECK_CONFIG_PATH, LossParams, TOY_CONFIG_PATH, format_losses, grad_check, make_toy_example,
                     network_loss_fn, train_toy, yolo_loss_array)
from weights_manager import init_random_weights, init_toy_model, read_weights_file, write_weights_file

GRAD_CHECK_TOLERANCE = 1e-3


class UsageError(Exception):
    pass


class CliParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _require_file(path: Optional[str], what: str):
    if path is not None and not os.path.isfile(path):
        raise ConfigurationError(f"{what} not found: {path}")


def _write_output(data, out: Optional[str]):
    """Data goes to --out when given, otherwise to stdout."""
    if isinstance(data, str):
        data = data.encode('utf-8')
    if out:
        directory = os.path.dirname(out)
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(out, 'wb') as file:
            file.write(data)
    else:
        sys.stdout.write(data.decode('utf-8'))
        sys.stdout.flush()


class DetectorBench:
    def __init__(self, settings_path: str = "config/config.yaml"):
        """Load settings and set up logging for one CLI invocation."""
        self.config_manager = ConfigManager(settings_path)
        self.logger = LoggingManager(self.config_manager.get_logging_config())

    def _model(self, config_name: str, weights: Optional[str], size: Optional[int] = None, seed: int = 42):
        config = resolve_config(config_name, size)
        if weights:
            _require_file(weights, "Weights file")
            return read_weights_file(weights, config)
        scale = float(self.config_manager.get_init_config().get('scale', 0.05))
        print(f"No weights given; using random weights, seed {seed}", file=sys.stderr)
        return init_random_weights(config, seed=seed, scale=scale)

    def _detect_params(self, args) -> DetectParams:
        settings = dict(self.config_manager.get_detect_config())
        overrides = {'conf_threshold': args.conf, 'nms_iou_threshold': args.nms,
                     'min_area': args.min_area, 'max_area': args.max_area}
        settings.update({key: value for key, value in overrides.items() if value is not None})
        return DetectParams.from_config(settings)

    def cmd_detect(self, args) -> int:
        _require_file(args.image, "Image")
        model = self._model(args.config, args.weights, seed=args.seed)
        image = read_ppm(args.image)
        dets = detect(model, image, self._detect_params(args), threads=args.threads)
        self.logger.info(f"{args.image}: {len(dets)} detections")
        _write_output(format_detections(dets), args.out)
        if args.draw:
            write_ppm(draw_detections(image, dets), args.draw)
        return 0

    def cmd_eval(self, args) -> int:
        _require_file(args.dataset, "Dataset list")
        eval_config = self.config_manager.get_eval_config()
        model = self._model(args.config, args.weights, seed=args.seed)
        gts = load_annotations(args.dataset)
        summary = summarize_dataset(gts)
        self.logger.info(f"Dataset: {summary['images']} images, {summary['boxes']} boxes")
        threshold = args.iou_match if args.iou_match is not None else float(eval_config['iou_match_threshold'])
        workers = args.workers if args.workers is not None else int(eval_config['workers'])
        report = evaluate_dataset(model, gts, self._detect_params(args), threshold, workers)
        self.logger.info(f"Evaluated {report.images} images, skipped {len(report.skipped)}")
        _write_output(report.to_json() if args.format == 'json' else report.to_text(), args.out)
        return 0

    def cmd_bench(self, args) -> int:
        bench = self.config_manager.get_bench_config()
        seed = args.seed if args.seed is not None else int(bench['seed'])
        model = self._model(args.config, args.weights, args.size, seed)
        result = benchmark_fps(model, model.config.input_size,
                               args.warmup if args.warmup is not None else int(bench['warmup']),
                               args.runs if args.runs is not None else int(bench['runs']),
                               args.threads if args.threads is not None else int(bench['threads']),
                               seed)
        self.logger.log_benchmark(result.name, result.input_size, result.fps, result.median_latency * 1000)
        _write_output(result.to_csv(), args.out)
        return 0

    def cmd_sweep(self, args) -> int:
        _require_file(args.sweep_config, "Sweep configuration")
        cfg = SweepConfig.from_yaml(args.sweep_config).with_overrides(
            models=tuple(args.models) if args.models else None,
            sizes=tuple(args.sizes) if args.sizes else None,
            weights=ScoreWeights(*args.weights) if args.weights else None,
            warmup=args.warmup, runs=args.runs, threads=args.threads, seed=args.seed, dataset=args.dataset,
            conf_threshold=args.conf, nms_iou_threshold=args.nms, iou_match_threshold=args.iou_match)
        table = run_sweep(cfg, progress=self.logger.log_progress)
        for model, size, reason in table.skipped:
            self.logger.log_skip(f"{model}@{size}", reason)
        selected = table.selected
        if selected is not None:
            self.logger.info(f"Selected {selected.model}@{selected.input_size} (score {selected.score:.4f})")
        _write_output(emit_report(table, args.format, args.baseline), args.out)
        return 0

    def cmd_grad_check(self, args) -> int:
        rng = np.random.default_rng(args.seed)
        params = LossParams.from_config(self.config_manager.get_train_config())
        lines = ['check,max_error,mean_error,ok']
        anchors = ((1.0, 1.0), (2.5, 1.5), (0.6, 2.0))
        for instance in range(args.instances):
            s = int(rng.integers(2, 6))
            classes = int(rng.integers(1, 4))
            pred = rng.normal(0.0, 1.0, (len(anchors) * (5 + classes), s, s))
            gts = [(int(rng.integers(0, classes)), rng.uniform(0.05, 0.95, 2), rng.uniform(0.05, 0.6, 2))
                   for _ in range(int(rng.integers(1, 4)))]
            boxes = [GroundTruthBox(c, BBox(float(xy[0]), float(xy[1]), float(wh[0]), float(wh[1])))
                     for c, xy, wh in gts]
            result = grad_check(lambda x: yolo_loss_array(x, boxes, anchors, params), pred, args.eps,
                                args.samples, args.seed + instance)
            lines.append(f'loss_{instance},{result.max_error:.3e},{result.mean_error:.3e},'
                         f'{str(result.max_error < GRAD_CHECK_TOLERANCE).lower()}')

        net = random_trainable(resolve_config(GRADCHECK_CONFIG_PATH), seed=args.seed)
        x = rng.uniform(0.0, 1.0, net.config.input_shape)
        _, boxes = make_toy_example(net.config.input_size)
        result = grad_check(network_loss_fn(net, x, boxes, params), net.flat_parameters(), args.network_eps,
                            args.samples, args.seed)
        lines.append(f'network,{result.max_error:.3e},{result.mean_error:.3e},'
                     f'{str(result.max_error < GRAD_CHECK_TOLERANCE).lower()}')
        _write_output('\n'.join(lines) + '\n', args.out)
        return 0

    def cmd_train_toy(self, args) -> int:
        train = self.config_manager.get_train_config()
        config = resolve_config(args.config)
        if args.synthetic or not args.image:
            image, boxes = make_toy_example(config.input_size)
        else:
            _require_file(args.image, "Image")
            image = read_ppm(args.image)
            annotation = args.annotation or os.path.splitext(args.image)[0] + '.txt'
            boxes = list(read_annotation(annotation))
        model = init_toy_model(config, seed=args.seed)
        steps = args.steps if args.steps is not None else int(train['steps'])
        lr = args.lr if args.lr is not None else float(train['learning_rate'])
        trained, losses = train_toy(model, image, boxes, steps, lr, LossParams.from_config(train),
                                    log_interval=int(train.get('log_interval', 100)))
        if losses:
            self.logger.log_training_step(len(losses) - 1, losses[-1])
        if args.loss_out:
            _write_output(format_losses(losses), args.loss_out)
        if args.out:
            write_weights_file(trained, args.out)

        dets = detect(trained, image, DetectParams())
        best = max((iou(det.bbox, gt.bbox) for det in dets[:1] for gt in boxes), default=0.0)
        initial = losses[0] if losses else float('nan')
        final = losses[-1] if losses else float('nan')
        sys.stdout.write(f'steps,{steps}\ninitial_loss,{initial:.6f}\nfinal_loss,{final:.6f}\n'
                         f'top_box_iou,{best:.4f}\n')
        return 0

    def cmd_ops(self, args) -> int:
        report = count_ops(resolve_config(args.config, args.size))
        for layer in report.layers:
            self.logger.log_layer(layer.index, layer.kind, layer.output_shape, layer.macs)
        _write_output(report.to_csv(), args.out)
        return 0

    def cmd_synth(self, args) -> int:
        path = generate_synthetic_dataset(args.out_dir, args.count, args.size, args.seed, args.max_objects)
        sys.stdout.write(path + '\n')
        return 0


def build_parser() -> CliParser:
    parser = CliParser(prog='dronet-bench', description='Single-shot detector engine and design-space benchmark')
    parser.add_argument('--settings', default='config/config.yaml', help='Settings YAML file')
    sub = parser.add_subparsers(dest='command', metavar='COMMAND')

    def detection_flags(p):
        p.add_argument('--conf', type=float, help='Confidence threshold')
        p.add_argument('--nms', type=float, help='NMS IoU threshold')
        p.add_argument('--min-area', type=float, help='Size gate: minimum normalized box area')
        p.add_argument('--max-area', type=float, help='Size gate: maximum normalized box area')

    p = sub.add_parser('detect', help='Detect objects in one PPM image')
    p.add_argument('--config', required=True, help='Reference model name or .cfg path')
    p.add_argument('--weights', help='Binary weights file (random weights when absent)')
    p.add_argument('--image', required=True)
    p.add_argument('--seed', type=int, default=42)
    p.add_argument('--threads', type=int, default=1)
    p.add_argument('--draw', help='Write an annotated copy of the image here')
    p.add_argument('--out')
    detection_flags(p)

    p = sub.add_parser('eval', help='Evaluate a model on an annotated image list')
    p.add_argument('--config', required=True)
    p.add_argument('--weights')
    p.add_argument('--dataset', required=True, help='Image list file')
    p.add_argument('--seed', type=int, default=42)
    p.add_argument('--iou-match', type=float)
    p.add_argument('--workers', type=int)
    p.add_argument('--format', choices=('json', 'text'), default='json')
    p.add_argument('--out')
    detection_flags(p)

    p = sub.add_parser('bench', help='Measure forward-pass latency and FPS')
    p.add_argument('--config', required=True)
    p.add_argument('--weights')
    p.add_argument('--size', type=int)
    p.add_argument('--warmup', type=int)
    p.add_argument('--runs', type=int)
    p.add_argument('--threads', type=int)
    p.add_argument('--seed', type=int)
    p.add_argument('--out')

    p = sub.add_parser('sweep', help='Rank models and input sizes by weighted score')
    p.add_argument('--sweep-config', default='config/sweep.yaml')
    p.add_argument('--models', nargs='+')
    p.add_argument('--sizes', nargs='+', type=int)
    p.add_argument('--weights', nargs=4, type=float, metavar=('W_FPS', 'W_IOU', 'W_SENS', 'W_PREC'))
    p.add_argument('--dataset')
    p.add_argument('--warmup', type=int)
    p.add_argument('--runs', type=int)
    p.add_argument('--threads', type=int)
    p.add_argument('--seed', type=int)
    p.add_argument('--conf', type=float)
    p.add_argument('--nms', type=float)
    p.add_argument('--iou-match', type=float)
    p.add_argument('--format', choices=('csv', 'json', 'text'), default='csv')
    p.add_argument('--baseline', default='tiny_yolo_voc', help='Model for the speedup summary (text format)')
    p.add_argument('--out')

    p = sub.add_parser('grad-check', help='Check analytic gradients against finite differences')
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--eps', type=float, default=1e-3)
    p.add_argument('--network-eps', type=float, default=1e-5)
    p.add_argument('--samples', type=int, default=200)
    p.add_argument('--instances', type=int, default=20)
    p.add_argument('--out')

    p = sub.add_parser('train-toy', help='Overfit a tiny network on one image')
    p.add_argument('--config', default=TOY_CONFIG_PATH)
    p.add_argument('--image')
    p.add_argument('--annotation')
    p.add_argument('--synthetic', action='store_true', help='Generate the single-square image')
    p.add_argument('--steps', type=int)
    p.add_argument('--lr', type=float)
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--loss-out', help='Write the step,loss trajectory CSV here')
    p.add_argument('--out', help='Write trained weights here')

    p = sub.add_parser('ops', help='Per-layer MACs and parameters')
    p.add_argument('--config', required=True)
    p.add_argument('--size', type=int)
    p.add_argument('--out')

    p = sub.add_parser('synth', help='Generate a synthetic annotated dataset')
    p.add_argument('--out-dir', required=True)
    p.add_argument('--count', type=int, default=20)
    p.add_argument('--size', type=int, default=256)
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--max-objects', type=int, default=4)
    return parser


COMMANDS = {
    'detect': DetectorBench.cmd_detect,
    'eval': DetectorBench.cmd_eval,
    'bench': DetectorBench.cmd_bench,
    'sweep': DetectorBench.cmd_sweep,
    'grad-check': DetectorBench.cmd_grad_check,
    'train-toy': DetectorBench.cmd_train_toy,
    'ops': DetectorBench.cmd_ops,
    'synth': DetectorBench.cmd_synth,
}


def dispatch(argv: List[str]) -> int:
    """Run one command; 0 on success, 1 on input errors, 2 on internal errors."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    if not args.command:
        parser.print_usage(sys.stderr)
        return 1
    app = None
    try:
        app = DetectorBench(args.settings)
        return COMMANDS[args.command](app, args)
    except DetectorError as e:
        _report_failure(app, args.command, f"error: {e}")
        return 1
    except Exception as e:
        _report_failure(app, args.command, f"internal error: {type(e).__name__}: {e}")
        return 2


def _report_failure(app: Optional[DetectorBench], command: str, message: str):
    print(message, file=sys.stderr)
    if app is not None:
        app.logger.record_failure(f"{command}: {message}")


def main():
    """Main entry point for the detector benchmark."""
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
