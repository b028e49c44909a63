#!/usr/bin/env python3
"""
DEFN Command Line
train | finetune | eval | predict | augment | reconstruct | quantify
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

from .config import RunConfig, load_run_config, setup_logging
from .errors import ConfigError, DefnError
from .harness import evaluate, load_cases, load_model, predict, resolve_device, train
from .recon_quant import Reconstructor
from .sdi_augment import SdiAugmenter
from .volume_io import FORMATS, class_counts, load_volume, save_volume

logger = logging.getLogger(__name__)

# commands only need the epoch count of the phase they run
EPOCH_DEFAULTS = {'optim.pretrain_epochs': 0, 'optim.finetune_epochs': 0}


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument('--config', help='JSON run config file')
    parser.add_argument('--log-level', default=None, help='DEBUG, INFO, WARNING or ERROR (env DEFN_LOG_LEVEL)')
    parser.add_argument('--seed', type=int, default=None, help='overrides config seed (env DEFN_SEED)')
    parser.add_argument('--device', default=None, help='cpu or cuda[:N] (env DEFN_DEVICE)')


def _volume_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument('--format', choices=FORMATS, default=None)
    parser.add_argument('--spacing', type=float, nargs=3, metavar=('MM_D', 'MM_H', 'MM_W'), default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='defn', description='Retinal OCT segmentation toolkit')
    sub = parser.add_subparsers(dest='command', required=True)

    for name in ('train', 'finetune'):
        p = sub.add_parser(name, help=f'{name} phase')
        _common(p)
        p.add_argument('--data', help='corpus directory for this phase')
        p.add_argument('--epochs', type=int, default=None)
        p.add_argument('--batch-size', type=int, default=None)
        p.add_argument('--lr', type=float, default=None)
        p.add_argument('--max-steps', type=int, default=None)
        p.add_argument('--output-dir', default=None)
        p.add_argument('--resume', default=None, help='checkpoint of this phase to continue from')
        if name == 'finetune':
            p.add_argument('--from', dest='finetune_from', default=None, help='pretrain checkpoint')

    p = sub.add_parser('eval', help='evaluate a checkpoint on a test split')
    _common(p)
    _volume_args(p)
    p.add_argument('--checkpoint', default=None)
    p.add_argument('--data', help='test split directory')
    p.add_argument('--out', default=None, help='report directory')
    p.add_argument('--oracle', action='store_true', help='score ground truth against itself')
    p.add_argument('--tiled', action='store_true', help='sliding-window inference')

    p = sub.add_parser('predict', help='segment one volume')
    _common(p)
    _volume_args(p)
    p.add_argument('--checkpoint', required=True)
    p.add_argument('--in', dest='input', required=True)
    p.add_argument('--out', required=True)
    p.add_argument('--tiled', action='store_true')

    p = sub.add_parser('augment', help='stochastic defect injection over a corpus')
    _common(p)
    p.add_argument('--in', dest='input', required=True)
    p.add_argument('--out', required=True)
    p.add_argument('--format', choices=FORMATS, default=None)
    p.add_argument('--strategy', choices=('isolated', 'comprehensive'), default=None)
    p.add_argument('--target-slices', type=int, default=None)
    p.add_argument('--strength-min', type=float, default=None)
    p.add_argument('--strength-max', type=float, default=None)
    p.add_argument('--margin', type=int, default=None)
    p.add_argument('--blur-sigma', type=float, default=None)

    p = sub.add_parser('reconstruct', help='meshes and ETDRS report for a labeled volume')
    _common(p)
    _volume_args(p)
    p.add_argument('--in', dest='input', required=True)
    p.add_argument('--out', required=True)
    p.add_argument('--sigma', type=float, default=1.0)
    p.add_argument('--iso', type=float, default=0.5)
    p.add_argument('--laterality', choices=('OD', 'OS'), default='OD')

    p = sub.add_parser('quantify', help='ETDRS sector volumes for a labeled volume')
    _common(p)
    _volume_args(p)
    p.add_argument('--in', dest='input', required=True)
    p.add_argument('--laterality', choices=('OD', 'OS'), default='OD')
    p.add_argument('--center', type=float, nargs=2, metavar=('H_MM', 'W_MM'), default=None)
    p.add_argument('--out', default=None, help='CSV report path')
    return parser


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    phase_key = 'optim.finetune_epochs' if args.command == 'finetune' else 'optim.pretrain_epochs'
    mapping = {
        'seed': getattr(args, 'seed', None),
        'device': getattr(args, 'device', None),
        'output_dir': getattr(args, 'output_dir', None),
        'finetune_from': getattr(args, 'finetune_from', None),
        'optim.batch_size': getattr(args, 'batch_size', None),
        'optim.lr': getattr(args, 'lr', None),
        'optim.max_steps': getattr(args, 'max_steps', None),
        phase_key: getattr(args, 'epochs', None),
        'data.format': getattr(args, 'format', None),
        'data.spacing': getattr(args, 'spacing', None),
        'sdi.strategy': getattr(args, 'strategy', None),
        'sdi.target_slices': getattr(args, 'target_slices', None),
        'sdi.strength_min': getattr(args, 'strength_min', None),
        'sdi.strength_max': getattr(args, 'strength_max', None),
        'sdi.margin': getattr(args, 'margin', None),
        'sdi.blur_sigma': getattr(args, 'blur_sigma', None),
    }
    if args.command in ('train', 'finetune') and args.data:
        mapping['data.pretrain' if args.command == 'train' else 'data.finetune'] = args.data
    if args.command == 'eval' and args.data:
        mapping['data.test'] = args.data
    return mapping


def _load_config(args: argparse.Namespace) -> RunConfig:
    defaults = dict(EPOCH_DEFAULTS)
    if args.command == 'train':
        defaults.pop('optim.pretrain_epochs')
    elif args.command == 'finetune':
        defaults.pop('optim.finetune_epochs')
    return load_run_config(args.config, _overrides(args), defaults)


def _spacing(config: RunConfig):
    return tuple(config.data.spacing) if config.data.spacing else None


def run_train(args: argparse.Namespace, config: RunConfig) -> Dict[str, Any]:
    phase = 'pretrain' if args.command == 'train' else 'finetune'
    return train(config, phase, resume_from=args.resume)


def run_eval(args: argparse.Namespace, config: RunConfig) -> Dict[str, Any]:
    if not config.data.test:
        raise ConfigError("eval needs a test split (--data or data.test)")
    volumes = load_cases(config.data.test, config.data.format, _spacing(config))
    report = evaluate(args.checkpoint, volumes, config, out_dir=args.out, oracle=args.oracle, tiled=args.tiled)
    macro = report.frame[report.frame['case'] == 'mean']
    return {'status': 'success', 'cases': len(volumes), 'macro': json.loads(macro.to_json(orient='records'))}


def run_predict(args: argparse.Namespace, config: RunConfig) -> Dict[str, Any]:
    device = resolve_device(config.device)
    model, state = load_model(args.checkpoint, device)
    volume = load_volume(args.input, config.data.format, _spacing(config))
    input_size = tuple(state['config']['data']['input_size'])
    labels = predict(model, volume, input_size, tiled=args.tiled, device=device)
    predicted = volume.replace(labels=labels)
    save_volume(predicted, args.out, config.data.format)
    return {'status': 'success', 'output': args.out, 'class_voxels': class_counts(predicted)}


def run_augment(args: argparse.Namespace, config: RunConfig) -> Dict[str, Any]:
    augmenter = SdiAugmenter(config.sdi)
    return augmenter.augment_directory(args.input, args.out, config.data.format, config.seed)


def _mesh_summary(meshes) -> Dict[str, Any]:
    return {name: {'vertices': int(len(m.vertices)), 'faces': int(len(m.faces)),
                   'volume_mm3': m.volume(), 'empty': m.empty}
            for name, m in meshes.items()}


def run_reconstruct(args: argparse.Namespace, config: RunConfig) -> Dict[str, Any]:
    volume = load_volume(args.input, config.data.format, _spacing(config))
    result = Reconstructor(args.sigma, args.iso, args.laterality).run(
        volume.labels, volume.spacing, args.out, case=Path(args.input).name.split('.')[0])
    return {
        'status': 'success',
        'files': result['files'],
        'timing_s': result['timing_s'],
        'meshes': _mesh_summary(result['meshes']),
        'warnings': result['report'].warnings,
    }


def run_quantify(args: argparse.Namespace, config: RunConfig) -> Dict[str, Any]:
    volume = load_volume(args.input, config.data.format, _spacing(config))
    center = tuple(args.center) if args.center else None
    report = Reconstructor(laterality=args.laterality).quantify(volume.labels, volume.spacing, center)
    if args.out:
        report.to_csv(args.out)
    return {
        'status': 'success',
        'center_mm': list(report.center),
        'laterality': report.laterality,
        'warnings': report.warnings,
        'regions': report.to_frame().to_dict(orient='records'),
    }


COMMANDS = {
    'train': run_train,
    'finetune': run_train,
    'eval': run_eval,
    'predict': run_predict,
    'augment': run_augment,
    'reconstruct': run_reconstruct,
    'quantify': run_quantify,
}


def main(argv: Optional[List[str]] = None) -> int:
    """Entry point; prints a JSON result to stdout and exits 0, 2, 3, 4 or 1"""
    args = build_parser().parse_args(argv)
    try:
        setup_logging(args.log_level)
        config = _load_config(args)
        result = COMMANDS[args.command](args, config)
        print(json.dumps(result, indent=2, default=str))
        return 0
    except DefnError as e:
        print(json.dumps({'status': 'error', 'error_type': type(e).__name__, 'message': str(e)}))
        print(f"{type(e).__name__}: {e}", file=sys.stderr)
        return e.exit_code
    except Exception as e:
        logger.exception("Unexpected failure")
        print(json.dumps({'status': 'error', 'error_type': type(e).__name__, 'message': str(e)}))
        print(f"Unexpected error: {e}", file=sys.stderr)
        return 1


if __name__ == '__main__':
    sys.exit(main())
