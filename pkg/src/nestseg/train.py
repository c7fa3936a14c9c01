"""Training loop, evaluation, tiled prediction and the ablation runner."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional, Sequence

import numpy as np

from . import checkpoint as ckpt
from .data import (PatchGrid, Sample, augment, extract_patches, load_images, reassemble,
                   stack, write_mask)
from .losses import LOSS_KINDS, LossConfig, compute_loss
from .metrics import MetricReport, evaluate_dataset
from .model import ModelConfig, NestedUNet, build, count_params, estimate_flops
from .optim import Adam
from .tensor import Tensor, backward, no_grad

log = logging.getLogger(__name__)

THRESHOLD = 0.5


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 4
    epochs: int = 30
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    augment: bool = True
    eval_every_epoch: bool = True
    loss: LossConfig = field(default_factory=LossConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    def validate(self) -> None:
        if not self.lr > 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        self.loss.validate()
        self.model.validate()

    def to_dict(self) -> dict[str, Any]:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        d["loss"] = self.loss.to_dict()
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TrainConfig":
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {unknown}")
        if "loss" in d:
            d["loss"] = LossConfig.from_dict(d["loss"])
        if "model" in d:
            d["model"] = ModelConfig.from_dict(d["model"])
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        return cls.from_dict(json.loads(text))


class NonFiniteLossError(RuntimeError):
    pass


@dataclass
class TrainState:
    model: NestedUNet
    optimizer: Adam
    config: TrainConfig
    epoch: int = 0
    best_iou: float = -1.0
    best_epoch: int = 0
    history: list[dict[str, Any]] = field(default_factory=list)


def init_state(cfg: TrainConfig) -> TrainState:
    cfg.validate()
    model = build(cfg.model, cfg.seed)
    opt = Adam(list(model.named_parameters()), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    return TrainState(model, opt, cfg)


# -- checkpoint plumbing ------------------------------------------------------


def state_arrays(state: TrainState) -> dict[str, np.ndarray]:
    arrays = {f"param.{n}": p.data for n, p in state.model.named_parameters()}
    arrays.update({f"buffer.{n}": b for n, b in state.model.named_buffers()})
    arrays.update(state.optimizer.state_arrays())
    return arrays


def save_state(path: str | Path, state: TrainState) -> None:
    meta = {
        "format": "nestseg-checkpoint",
        "config": state.config.to_dict(),
        "epoch": state.epoch,
        "step": state.optimizer.t,
        "best_iou": state.best_iou,
        "best_epoch": state.best_epoch,
        "history": state.history,
    }
    ckpt.save(path, state_arrays(state), meta)


def load_state(path: str | Path) -> TrainState:
    arrays, meta = ckpt.load(path)
    cfg = TrainConfig.from_dict(meta["config"])
    state = init_state(cfg)
    model_state = {}
    for n, _ in state.model.named_parameters():
        model_state[n] = arrays[f"param.{n}"]
    for n, _ in state.model.named_buffers():
        model_state[n] = arrays[f"buffer.{n}"]
    state.model.load_state_dict(model_state)
    state.optimizer.load_state_arrays(arrays, meta["step"])
    state.epoch = meta["epoch"]
    state.best_iou = meta["best_iou"]
    state.best_epoch = meta["best_epoch"]
    state.history = meta["history"]
    return state


def load_model(path: str | Path) -> NestedUNet:
    """Model only, in inference mode."""
    return load_state(path).model.eval()


# -- inference ----------------------------------------------------------------


def predict_batch(model: NestedUNet, images: np.ndarray, batch_size: int = 4) -> np.ndarray:
    """Probabilities ``(N, 1, H, W)`` for images at the model's input size.

    Runs in inference mode without touching parameters or running stats, and
    restores the previous mode.
    """
    was_training = model.training
    model.eval()
    try:
        out = []
        with no_grad():
            for i in range(0, len(images), batch_size):
                out.append(model(Tensor(images[i:i + batch_size].astype(np.float32))).data)
        return np.concatenate(out)
    finally:
        model.train(was_training)


def predict_image(model: NestedUNet, image: np.ndarray, batch_size: int = 4
                  ) -> tuple[np.ndarray, Optional[PatchGrid]]:
    """Probability map ``(H, W)`` for an arbitrary-size ``(C, H, W)`` image.

    Images at the model input size go straight through; anything else is cut
    into overlapping tiles of the input size with half-tile stride and the
    tile probabilities are averaged back.
    """
    cfg = model.config
    if image.shape[0] != cfg.in_channels:
        raise ValueError(f"image has {image.shape[0]} channels, model expects {cfg.in_channels}")
    if tuple(image.shape[1:]) == cfg.input_size:
        return predict_batch(model, image[None], batch_size)[0, 0], None
    ph, pw = cfg.input_size
    if ph != pw:
        raise ValueError(f"tiled prediction needs a square model input, got {cfg.input_size}")
    tiles, grid = extract_patches(image, ph, max(ph // 2, 1))
    probs = predict_batch(model, np.stack(tiles), batch_size)
    return reassemble(list(probs), grid)[0], grid


def evaluate(model: NestedUNet, samples: Sequence[Sample], batch_size: int = 4) -> MetricReport:
    pairs = []
    for s in samples:
        prob, _ = predict_image(model, s.image, batch_size)
        pairs.append((prob >= THRESHOLD, s.mask))
    return evaluate_dataset(pairs, [s.id for s in samples])


def predict_dir(checkpoint_path: str | Path, image_dir: str | Path, out_dir: str | Path,
                threshold: float = THRESHOLD) -> list[Path]:
    """Write a 0/255 mask PNG per input PNG plus ``grids.json`` for tiled images."""
    model = load_model(checkpoint_path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written, grids = [], {}
    for stem, image in load_images(image_dir):
        prob, grid = predict_image(model, image)
        path = out_dir / f"{stem}.png"
        write_mask(path, prob >= threshold)
        written.append(path)
        if grid is not None:
            grids[stem] = json.loads(grid.to_json())
    (out_dir / "grids.json").write_text(json.dumps(grids, sort_keys=True, indent=1))
    return written


# -- training -----------------------------------------------------------------


def epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])


def epoch_batches(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Shuffled index batches for one epoch; sizes differ by at most one."""
    perm = np.random.default_rng([seed, epoch, 1]).permutation(n)
    return np.array_split(perm, math.ceil(n / batch_size))


def train_step(state: TrainState, x: np.ndarray, y: np.ndarray) -> float:
    model, opt = state.model, state.optimizer
    model.train()
    opt.zero_grad()
    probs = model(Tensor(x))
    loss = compute_loss(state.config.loss, y, probs)
    value = loss.item()
    if not math.isfinite(value):
        raise NonFiniteLossError(f"non-finite loss {value}")
    backward(loss)
    opt.step()
    return value


def run_epoch(state: TrainState, samples: Sequence[Sample]) -> float:
    cfg = state.config
    epoch = state.epoch + 1
    aug_seed = epoch_seed(cfg.seed, epoch)
    losses = []
    for b, idx in enumerate(epoch_batches(len(samples), cfg.batch_size, cfg.seed, epoch)):
        batch = [samples[i] for i in idx]
        if cfg.augment:
            batch = [augment(s, aug_seed) for s in batch]
        x, y = stack(batch)
        try:
            losses.append(train_step(state, x, y))
        except NonFiniteLossError as exc:
            raise NonFiniteLossError(f"epoch {epoch} batch {b}: {exc}") from None
    state.epoch = epoch
    return float(np.mean(losses))


def train(cfg: TrainConfig, train_samples: Sequence[Sample], val_samples: Sequence[Sample],
          out_dir: str | Path | None = None, resume: str | Path | None = None,
          until_epoch: int | None = None,
          on_epoch: Callable[[dict[str, Any]], None] | None = None) -> TrainState:
    """Train, validating after each epoch and keeping the best-IoU weights.

    With ``out_dir`` set, writes ``last.ckpt`` every epoch, ``best.ckpt`` on
    every validation-IoU improvement, and ``log.txt`` / ``log.json``.
    ``resume`` continues from a checkpoint; ``until_epoch`` stops early (the
    run can later be resumed to ``cfg.epochs``).
    """
    if not train_samples:
        raise ValueError("no training samples")
    state = load_state(resume) if resume is not None else init_state(cfg)
    cfg = state.config
    stop = cfg.epochs if until_epoch is None else min(until_epoch, cfg.epochs)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    while state.epoch < stop:
        t0 = time.perf_counter()
        loss = run_epoch(state, train_samples)
        entry: dict[str, Any] = {"epoch": state.epoch, "loss": loss}
        if cfg.eval_every_epoch and val_samples:
            report = evaluate(state.model, val_samples, cfg.batch_size)
            entry["val"] = report.means
            iou = report.means["IoU"]
            if iou > state.best_iou:
                state.best_iou, state.best_epoch = iou, state.epoch
                if out is not None:
                    save_state(out / "best.ckpt", state)
        entry["seconds"] = round(time.perf_counter() - t0, 3)
        state.history.append(entry)
        log.info("epoch %d loss %.5f%s", state.epoch, loss,
                 f" val IoU {entry['val']['IoU']:.4f}" if "val" in entry else "")
        if out is not None:
            save_state(out / "last.ckpt", state)
            write_logs(out, state.history)
        if on_epoch is not None:
            on_epoch(entry)
    return state


def format_log(history: Sequence[dict[str, Any]]) -> str:
    lines = [f"{'epoch':>5}  {'loss':>10}  {'IoU':>8}  {'Dice':>8}  {'HD95':>8}  {'sec':>7}"]
    for e in history:
        v = e.get("val", {})
        cells = [f"{v[k]:8.4f}" if k in v else f"{'-':>8}" for k in ("IoU", "Dice", "HD95")]
        lines.append(f"{e['epoch']:>5}  {e['loss']:10.5f}  " + "  ".join(cells) + f"  {e.get('seconds', 0):7.1f}")
    return "\n".join(lines)


def write_logs(out: Path, history: Sequence[dict[str, Any]]) -> None:
    (out / "log.json").write_text(json.dumps(list(history), indent=1))
    (out / "log.txt").write_text(format_log(history) + "\n")


# -- ablation -----------------------------------------------------------------

ABLATION_ROWS: tuple[tuple[bool, bool, bool, bool], ...] = (
    (False, False, False, False),
    (True, False, False, False),
    (False, True, False, False),
    (True, True, False, False),
    (True, True, True, False),
    (True, True, True, True),
)
TOGGLE_FIELDS = ("inner_attention", "use_am", "use_cam", "use_eel")
TOGGLE_LABELS = ("in_A", "AM", "CAM", "EEL")


@dataclass
class AblationRow:
    label: str
    toggles: dict[str, bool]
    loss: str
    params: int
    gmacs: float
    iou: float = float("nan")
    hd95: float = float("nan")

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


@dataclass
class AblationReport:
    design: list[AblationRow]
    losses: list[AblationRow]

    def to_dict(self) -> dict[str, Any]:
        return {"design": [r.to_dict() for r in self.design],
                "losses": [r.to_dict() for r in self.losses]}

    def to_text(self) -> str:
        mark = {True: "Y", False: "-"}
        lines = ["Design choices",
                 "  ".join(f"{h:>4}" for h in TOGGLE_LABELS) + f"  {'Params':>9}  {'GMACs':>7}  {'IoU':>7}  {'HD95':>7}"]
        for r in self.design:
            flags = "  ".join(f"{mark[r.toggles[f]]:>4}" for f in TOGGLE_FIELDS)
            lines.append(f"{flags}  {r.params:>9d}  {r.gmacs:7.3f}  {r.iou:7.4f}  {r.hd95:7.3f}")
        lines += ["", "Loss functions", f"{'Loss':<9}  {'IoU':>7}  {'HD95':>7}"]
        for r in self.losses:
            lines.append(f"{r.loss:<9}  {r.iou:7.4f}  {r.hd95:7.3f}")
        return "\n".join(lines)


def ablation_plan(base: TrainConfig) -> tuple[list[TrainConfig], list[TrainConfig]]:
    """The six toggle rows (with the base loss) and the five loss rows (full model)."""
    design = []
    for row in ABLATION_ROWS:
        model = base.model.with_toggles(**dict(zip(TOGGLE_FIELDS, row)))
        design.append(dataclasses.replace(base, model=model))
    full = base.model.with_toggles(**{f: True for f in TOGGLE_FIELDS})
    losses = [dataclasses.replace(base, model=full, loss=dataclasses.replace(base.loss, kind=k))
              for k in LOSS_KINDS]
    return design, losses


def run_key(cfg: TrainConfig) -> str:
    """Cache key for an ablation run; per-epoch validation does not change the weights."""
    return json.dumps(dataclasses.replace(cfg, eval_every_epoch=False).to_dict(), sort_keys=True)


def ablate(base: TrainConfig, train_samples: Sequence[Sample], test_samples: Sequence[Sample],
           cache: dict[str, tuple[float, float]] | None = None, train_rows: bool = True,
           on_row: Callable[[AblationRow], None] | None = None,
           select: Callable[[TrainConfig], bool] | None = None) -> AblationReport:
    """Run every ablation row with the same seed and budget.

    Rows with identical configs (the full-toggle row with the base loss
    appears in both tables) are trained once. ``cache`` maps a config key
    to ``(IoU, HD95)`` and is filled in as runs finish; cached rows are
    reported without retraining. With ``train_rows=False`` only the
    structural columns are filled; ``select`` restricts training to the
    rows it accepts (others keep NaN scores unless cached).
    """
    cache = {} if cache is None else cache
    design_cfgs, loss_cfgs = ablation_plan(base)

    def row(cfg: TrainConfig, label: str) -> AblationRow:
        model = build(cfg.model, cfg.seed)
        r = AblationRow(label, {f: getattr(cfg.model, f) for f in TOGGLE_FIELDS}, cfg.loss.kind,
                        count_params(model), estimate_flops(model) / 1e9)
        key = run_key(cfg)
        wanted = train_rows and (select is None or select(cfg))
        if wanted or key in cache:
            if key not in cache:
                state = train(dataclasses.replace(cfg, eval_every_epoch=False), train_samples, [])
                m = evaluate(state.model, test_samples, cfg.batch_size).means
                cache[key] = (m["IoU"], m["HD95"])
            r.iou, r.hd95 = cache[key]
        if on_row is not None:
            on_row(r)
        return r

    design = [row(c, "".join("Y" if getattr(c.model, f) else "-" for f in TOGGLE_FIELDS))
              for c in design_cfgs]
    losses = [row(c, c.loss.kind) for c in loss_cfgs]
    return AblationReport(design, losses)
