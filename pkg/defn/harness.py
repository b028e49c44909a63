"""
Training Harness
Pretrain/finetune loops, checkpointing, evaluation and inference for DEFN
"""

import logging
import math
import os
import random
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
from torch.utils.data import DataLoader, Dataset
from tqdm import tqdm

from .config import NetConfig, RunConfig, set_seed
from .dwc_loss import DWCLoss
from .errors import ConfigError, DataError, NumericError
from .network import DEFN, build_model
from .sdi_augment import SdiAugmenter
from .seg_metrics import MetricsReport, aggregate_reports, evaluate_case
from .transforms import VolumeAugmenter
from .volume_io import RETINA, LabeledVolume, list_cases, load_volume, resample_volume

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
PHASES = ('pretrain', 'finetune')
LOG_COLUMNS = ['step', 'tau', 'lambda1', 'lambda2', 'lambda3', 'lambda4',
               'L_focal', 'L_boundary', 'L_dice', 'L_ce', 'L_rank', 'total']

PathLike = Union[str, Path]


def resolve_device(name: str) -> torch.device:
    if name.startswith('cuda') and not torch.cuda.is_available():
        raise ConfigError(f"Device {name} requested but CUDA is not available")
    return torch.device(name)


def load_cases(root: PathLike, format: str = 'slice_dir',
               spacing: Optional[Tuple[float, float, float]] = None) -> List[LabeledVolume]:
    cases = [load_volume(p, format, spacing) for p in list_cases(root, format)]
    logger.info(f"Loaded {len(cases)} cases from {root}")
    return cases


class VolumeDataset(Dataset):
    """Resampled, optionally defect-injected and augmented training volumes.

    Randomness for item i in epoch e comes from a generator seeded by (seed, e, i),
    so any batch can be regenerated without replaying earlier ones.
    """

    def __init__(self, volumes: Sequence[LabeledVolume], config: RunConfig, train: bool = True):
        self.volumes = list(volumes)
        self.input_size = tuple(config.data.input_size)
        self.seed = config.seed
        self.train = train
        self.augmenter = VolumeAugmenter(config.augment) if train else None
        self.sdi = SdiAugmenter(config.sdi) if train and config.sdi.enabled else None
        self.sdi_probability = config.sdi.probability
        self.epoch = 0

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def __len__(self) -> int:
        return len(self.volumes)

    def __getitem__(self, index: int) -> Tuple[torch.Tensor, torch.Tensor, int]:
        volume = self.volumes[index]
        rng = np.random.default_rng([self.seed, self.epoch, index])
        if self.sdi is not None and rng.random() < self.sdi_probability:
            if (volume.labels == RETINA).any():
                volume = self.sdi.augment(volume, int(rng.integers(2 ** 31))).volume
            else:
                logger.debug(f"Skipping defect injection for {volume.meta}: no retina")
        volume = resample_volume(volume, self.input_size)
        image, labels = volume.image, volume.labels
        if self.augmenter is not None:
            image, labels = self.augmenter(image, labels, rng)
        image_t = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32))[None]
        labels_t = torch.from_numpy(np.ascontiguousarray(labels).astype(np.int64))
        return image_t, labels_t, index


def save_checkpoint(state: Dict[str, Any], path: PathLike) -> Path:
    """Write-temp-then-rename so readers never see a partial file"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + '.tmp')
    torch.save(state, tmp)
    os.replace(tmp, path)
    return path


def load_checkpoint(path: PathLike, map_location: Union[str, torch.device] = 'cpu') -> Dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Checkpoint not found: {path}")
    state = torch.load(path, map_location=map_location, weights_only=False)
    if not isinstance(state, dict) or 'version' not in state:
        raise ConfigError(f"{path} is not a DEFN checkpoint (no version field)")
    if state['version'] != CHECKPOINT_VERSION:
        raise ConfigError(f"Unsupported checkpoint version {state['version']}")
    return state


def load_model(path: PathLike, device: Union[str, torch.device] = 'cpu') -> Tuple[DEFN, Dict[str, Any]]:
    state = load_checkpoint(path, device)
    net = NetConfig.model_validate(state['config']['net'])
    model = build_model(net).to(device)
    model.load_state_dict(state['model'])
    model.eval()
    return model, state


class Trainer:
    """Single-device optimisation loop driven by a RunConfig"""

    def __init__(self, config: RunConfig, phase: str = 'pretrain'):
        if phase not in PHASES:
            raise ConfigError(f"Unknown phase: {phase}")
        self.config = config
        self.phase = phase
        self.device = resolve_device(config.device)
        set_seed(config.seed)
        self.model = build_model(config.net).to(self.device)
        self.criterion = DWCLoss(config.loss, config.net.num_classes)
        self.optimizer = torch.optim.AdamW(self.model.parameters(), lr=config.optim.lr,
                                           weight_decay=config.optim.weight_decay)
        self.step = 0
        self.total_steps = 0
        self.out_dir = Path(config.output_dir)
        self.checkpoint_path = self.out_dir / f"{phase}.pt"
        self.log_path = self.out_dir / f"{phase}_metrics.csv"

    @property
    def epochs(self) -> int:
        return self.config.optim.pretrain_epochs if self.phase == 'pretrain' else self.config.optim.finetune_epochs

    def plan(self, n_items: int) -> Tuple[int, int]:
        steps_per_epoch = math.ceil(n_items / self.config.optim.batch_size)
        total = self.epochs * steps_per_epoch
        if self.config.optim.max_steps is not None:
            total = min(total, self.config.optim.max_steps)
        return steps_per_epoch, total

    def epoch_batches(self, epoch: int, n_items: int) -> List[List[int]]:
        generator = torch.Generator().manual_seed(self.config.seed * 100003 + epoch)
        order = torch.randperm(n_items, generator=generator).tolist()
        size = self.config.optim.batch_size
        return [order[i:i + size] for i in range(0, n_items, size)]

    def state_dict(self) -> Dict[str, Any]:
        state = {
            'version': CHECKPOINT_VERSION,
            'phase': self.phase,
            'config': self.config.dump(),
            'model': self.model.state_dict(),
            'optimizer': self.optimizer.state_dict(),
            'step': self.step,
            'total_steps': self.total_steps,
            'tau': self.step / self.total_steps if self.total_steps else 0.0,
            'rng': {
                'torch': torch.get_rng_state(),
                'numpy': np.random.get_state(),
                'python': random.getstate(),
            },
        }
        if torch.cuda.is_available():
            state['rng']['cuda'] = torch.cuda.get_rng_state_all()
        return state

    def _check_net(self, state: Dict[str, Any]) -> None:
        saved = NetConfig.model_validate(state['config']['net'])
        if saved != self.config.net:
            raise ConfigError(f"Checkpoint network config {saved.model_dump()} does not match run config")

    def resume(self, path: PathLike) -> None:
        """Restore weights, optimizer, schedule position and RNG streams"""
        state = load_checkpoint(path, self.device)
        self._check_net(state)
        if state.get('phase') != self.phase:
            raise ConfigError(f"Checkpoint phase {state.get('phase')} does not match {self.phase}")
        self.model.load_state_dict(state['model'])
        self.optimizer.load_state_dict(state['optimizer'])
        self.step = int(state['step'])
        rng = state['rng']
        torch.set_rng_state(rng['torch'])
        np.random.set_state(rng['numpy'])
        random.setstate(rng['python'])
        if 'cuda' in rng and torch.cuda.is_available():
            torch.cuda.set_rng_state_all(rng['cuda'])
        logger.info(f"Resumed {self.phase} from {path} at step {self.step}")

    def init_from(self, path: PathLike) -> None:
        """Load weights only; schedule and optimizer start fresh"""
        state = load_checkpoint(path, self.device)
        self._check_net(state)
        self.model.load_state_dict(state['model'])
        logger.info(f"Initialised {self.phase} weights from {path}")

    def _append_log(self, row: Dict[str, float]) -> None:
        frame = pd.DataFrame([row], columns=LOG_COLUMNS)
        frame.to_csv(self.log_path, mode='a', header=not self.log_path.exists(), index=False)

    def _truncate_log(self) -> None:
        if not self.log_path.exists():
            return
        if self.step == 0:
            self.log_path.unlink()
            return
        frame = pd.read_csv(self.log_path)
        frame[frame['step'] <= self.step].to_csv(self.log_path, index=False)

    def train_step(self, images: torch.Tensor, labels: torch.Tensor, batch_id: str) -> Dict[str, float]:
        tau = (self.step + 1) / self.total_steps
        self.model.train()
        images, labels = images.to(self.device), labels.to(self.device)
        try:
            logits = self.model(images)
            loss, breakdown = self.criterion(logits, labels, tau)
        except NumericError as e:
            raise NumericError(f"Non-finite loss at step {self.step + 1}, batch {batch_id}: {e}") from e
        if not torch.isfinite(loss):
            raise NumericError(f"Non-finite loss at step {self.step + 1}, batch {batch_id}")
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        self.optimizer.step()
        self.step += 1
        row = {'step': self.step, 'tau': tau}
        row.update({k: breakdown[k] for k in LOG_COLUMNS[2:]})
        return row

    def fit(self, dataset: VolumeDataset) -> Dict[str, Any]:
        if len(dataset) == 0:
            raise DataError("Training dataset is empty")
        self.out_dir.mkdir(parents=True, exist_ok=True)
        steps_per_epoch, self.total_steps = self.plan(len(dataset))
        self._truncate_log()
        last: Dict[str, float] = {}

        if self.step < self.total_steps:
            progress = tqdm(total=self.total_steps, initial=self.step, desc=self.phase, leave=False)
            epoch = self.step // steps_per_epoch
            while self.step < self.total_steps:
                dataset.set_epoch(epoch)
                batches = self.epoch_batches(epoch, len(dataset))
                consumed = self.step - epoch * steps_per_epoch
                # a private generator keeps loader start-up off the global torch stream
                loader = DataLoader(dataset, batch_sampler=batches[consumed:],
                                    num_workers=self.config.data.num_workers,
                                    generator=torch.Generator().manual_seed(self.config.seed + epoch))
                for images, labels, indices in loader:
                    batch_id = f"epoch {epoch} items {indices.tolist()}"
                    last = self.train_step(images, labels, batch_id)
                    self._append_log(last)
                    progress.update(1)
                    progress.set_postfix(loss=f"{last['total']:.4f}", tau=f"{last['tau']:.3f}")
                    if self.step % self.config.optim.checkpoint_every == 0:
                        save_checkpoint(self.state_dict(), self.checkpoint_path)
                    if self.step >= self.total_steps:
                        break
                epoch += 1
            progress.close()

        save_checkpoint(self.state_dict(), self.checkpoint_path)
        logger.info(f"{self.phase} finished at step {self.step}/{self.total_steps}")
        return {
            'status': 'success',
            'phase': self.phase,
            'steps': self.step,
            'total_steps': self.total_steps,
            'checkpoint': str(self.checkpoint_path),
            'metrics_log': str(self.log_path),
            'final': last,
        }


def _phase_corpus(config: RunConfig, phase: str) -> Optional[str]:
    return config.data.pretrain if phase == 'pretrain' else config.data.finetune


def train(config: RunConfig, phase: str = 'pretrain', volumes: Optional[Sequence[LabeledVolume]] = None,
          resume_from: Optional[PathLike] = None) -> Dict[str, Any]:
    """Run one training phase; finetune starts from config.finetune_from with tau reset"""
    trainer = Trainer(config, phase)
    if phase == 'finetune':
        if not config.finetune_from:
            raise ConfigError("finetune requires finetune_from (a pretrain checkpoint)")
        if resume_from is None:
            trainer.init_from(config.finetune_from)
    if resume_from is not None:
        trainer.resume(resume_from)

    if volumes is None:
        corpus = _phase_corpus(config, phase)
        if not corpus:
            raise ConfigError(f"No {phase} corpus configured (data.{phase})")
        volumes = load_cases(corpus, config.data.format, config.data.spacing)
    return trainer.fit(VolumeDataset(volumes, config, train=True))


def _tile_starts(size: int, window: int) -> List[int]:
    if size <= window:
        return [0]
    stride = max(1, window // 2)
    starts = list(range(0, size - window + 1, stride))
    if starts[-1] != size - window:
        starts.append(size - window)
    return starts


@torch.no_grad()
def _logits(model: DEFN, image: np.ndarray, device: torch.device) -> torch.Tensor:
    x = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32))[None, None].to(device)
    return model(x)[0].float().cpu()


def predict(model: DEFN, volume: LabeledVolume, input_size: Tuple[int, int, int] = (96, 96, 96),
            tiled: bool = False, device: Union[str, torch.device] = 'cpu') -> np.ndarray:
    """Per-voxel argmax (lowest class id wins ties) at the source geometry"""
    device = torch.device(device)
    model.eval()
    if not tiled:
        resampled = resample_volume(volume, input_size)
        pred = torch.argmax(_logits(model, resampled.image, device), dim=0).numpy().astype(np.uint8)
        back = resample_volume(resampled.replace(labels=pred), volume.shape)
        return np.array(back.labels)

    window = tuple(input_size)
    padded_shape = tuple(max(s, w) for s, w in zip(volume.shape, window))
    image = np.zeros(padded_shape, dtype=np.float32)
    image[:volume.shape[0], :volume.shape[1], :volume.shape[2]] = volume.image
    accum = torch.zeros((model.config.num_classes,) + padded_shape)
    counts = torch.zeros((1,) + padded_shape)
    for d in _tile_starts(padded_shape[0], window[0]):
        for h in _tile_starts(padded_shape[1], window[1]):
            for w in _tile_starts(padded_shape[2], window[2]):
                sl = (slice(d, d + window[0]), slice(h, h + window[1]), slice(w, w + window[2]))
                accum[(slice(None),) + sl] += _logits(model, image[sl], device)
                counts[(slice(None),) + sl] += 1
    pred = torch.argmax(accum / counts, dim=0).numpy().astype(np.uint8)
    return pred[:volume.shape[0], :volume.shape[1], :volume.shape[2]]


def evaluate(checkpoint: Optional[PathLike], volumes: Sequence[LabeledVolume], config: RunConfig,
             out_dir: Optional[PathLike] = None, oracle: bool = False, tiled: bool = False) -> MetricsReport:
    """Per-case metrics plus per-class means; oracle mode scores the ground truth against itself"""
    volumes = list(volumes)
    if not volumes:
        raise DataError("Test set is empty")
    model = None
    device = resolve_device(config.device)
    if not oracle:
        if checkpoint is None:
            raise ConfigError("evaluate needs a checkpoint unless oracle mode is set")
        model, _ = load_model(checkpoint, device)

    reports = []
    for i, volume in enumerate(tqdm(volumes, desc='evaluate', leave=False)):
        case = Path(volume.meta).name if volume.meta else f"case{i}"
        if oracle:
            pred = np.array(volume.labels)
        else:
            pred = predict(model, volume, tuple(config.data.input_size), tiled, device)
        reports.append(evaluate_case(pred, volume.labels, volume.spacing, case=case,
                                     class_map=volume.class_map))
    report = aggregate_reports(reports)

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        report.to_csv(out_dir / 'per_case.csv')
        macro = MetricsReport(report.frame[report.frame['case'] == 'mean'])
        macro.to_csv(out_dir / 'macro.csv')
        (out_dir / 'report.json').write_text(report.to_json())
        logger.info(f"Wrote evaluation reports to {out_dir}")
    return report
