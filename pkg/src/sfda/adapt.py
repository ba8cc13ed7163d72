"""Source pretraining and the alternating source-free adaptation loop.

One adaptation iteration is, in order: a generator step, a knowledge-transfer
step on the shared segmentation model, a self-supervised adaptation step on
the shared model, and a discriminator step. The frozen source copy is never
updated.
"""
from __future__ import annotations

import copy
import csv
import dataclasses
import logging
import math
import os
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import losses as L
from .attention import DualAttention, adapt_pool
from .dataset import DatasetManifest, load_split
from .ipsm import patch_entropy, rank_easy_hard, split_into_patches
from .metrics import Scores, accumulate, iou_scores, new_confusion
from .models import (
    BNStatsRecorder,
    Generator,
    PatchDiscriminator,
    SegModel,
    bn_layers,
    bn_snapshot,
    freeze,
    load_checkpoint,
    no_param_grad,
    save_checkpoint,
    seg_forward,
)

log = logging.getLogger(__name__)


class GateError(RuntimeError):
    """Pretraining finished below the required source-test mIoU."""

    def __init__(self, miou: float, gate: float):
        super().__init__(f"gate unreachable: source-test mIoU {miou:.4f} < {gate:.2f}")
        self.miou = miou
        self.gate = gate


class NumericalAbort(RuntimeError):
    """A training loss became NaN or infinite."""

    def __init__(self, record: dict):
        bad = {k: v for k, v in record.items() if isinstance(v, float) and not math.isfinite(v)}
        detail = bad or record.get("error", "parameters diverged")
        super().__init__(f"non-finite loss at iteration {record.get('iteration')}: {detail}")
        self.record = record


def set_determinism(seed: int, single_thread: bool = True) -> None:
    if single_thread:
        torch.set_num_threads(1)
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)


def poly_lr(base: float, it: int, max_it: int, power: float = 0.9) -> float:
    return base * (1 - it / max(max_it, 1)) ** power


def set_lr(opt: torch.optim.Optimizer, lr: float) -> None:
    for g in opt.param_groups:
        g["lr"] = lr


def evaluate(model: nn.Module, images, labels, num_classes: int, batch_size: int = 50) -> Scores:
    """mIoU etc. of ``model`` (eval mode) on arrays of images and labels."""
    was_training = model.training
    model.eval()
    cm = new_confusion(num_classes)
    images = torch.as_tensor(images)
    labels = np.asarray(labels)
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            pred = model(images[i : i + batch_size]).argmax(dim=1).numpy()
            cm = accumulate(cm, pred, labels[i : i + batch_size])
    model.train(was_training)
    return iou_scores(cm)


# --- source pretraining ---------------------------------------------------


@dataclass
class PretrainConfig:
    epochs: int = 12
    batch_size: int = 16
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    poly_power: float = 0.9
    seed: int = 0
    min_miou: float = 0.80
    enc_channels: tuple = (32, 64, 64, 128)
    dec_channels: tuple = (64, 32, 16)


def pretrain_source(
    train: DatasetManifest,
    test: DatasetManifest,
    config: PretrainConfig = PretrainConfig(),
    out_dir: str | os.PathLike | None = None,
) -> tuple[SegModel, Scores]:
    """Supervised cross-entropy training on the labelled source split.

    Raises :class:`GateError` if the source-test mIoU ends below ``min_miou``.
    """
    set_determinism(config.seed)
    C = train.spec.num_classes
    model = SegModel(C, config.enc_channels, config.dec_channels)
    x_train, y_train = load_split(train)
    x_test, y_test = load_split(test)
    x_train, y_train = torch.from_numpy(x_train), torch.from_numpy(y_train)
    opt = torch.optim.SGD(
        model.parameters(), lr=config.lr, momentum=config.momentum,
        weight_decay=config.weight_decay, nesterov=True,
    )
    rng = np.random.default_rng(config.seed)
    n_iter = len(x_train) // config.batch_size
    max_it = config.epochs * n_iter
    it = 0
    model.train()
    for epoch in range(config.epochs):
        order = rng.permutation(len(x_train))
        for b in range(n_iter):
            idx = order[b * config.batch_size : (b + 1) * config.batch_size]
            set_lr(opt, poly_lr(config.lr, it, max_it, config.poly_power))
            loss = F.cross_entropy(model(x_train[idx]), y_train[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            it += 1
        log.info("pretrain epoch %d loss %.4f", epoch + 1, loss.item())
    scores = evaluate(model, x_test, y_test, C)
    log.info("source-test mIoU %.4f", scores.miou)
    if out_dir is not None:
        save_checkpoint(model, out_dir, epoch=config.epochs, seed=config.seed, source_test_miou=scores.miou)
    if scores.miou < config.min_miou:
        raise GateError(scores.miou, config.min_miou)
    return model, scores


# --- adaptation -----------------------------------------------------------


@dataclass
class AdaptConfig:
    alpha: float = 1.0
    beta: float = 0.5
    tau: float = 0.5
    gamma: float = 0.01
    K: int = 4
    batch_size: int = 8
    fake_batch: int = 8
    epochs: int = 4
    iters_per_epoch: int = 0  # 0: one pass over the target train split
    seg_lr: float = 2.5e-3
    momentum: float = 0.9
    weight_decay: float = 1e-4
    poly_power: float = 0.9
    gen_lr: float = 1e-3
    disc_lr: float = 1e-5
    latent_dim: int = 256
    fake_size: int = 32
    embed_dim: int = 256
    seed: int = 0
    deterministic: bool = True
    use_bns: bool = True
    use_dad: bool = True
    use_ipsm: bool = True
    transfer_only: bool = False
    frozen_bn_eval: bool = True  # frozen model normalises with its stored statistics
    shared_bn_train: bool = True  # shared model normalises with batch statistics while training
    dam_init: str = "scaled"

    def __post_init__(self):
        if self.batch_size % 2:
            raise ValueError(f"batch size must be even, got {self.batch_size}")
        if self.K < 1:
            raise ValueError(f"K must be >= 1, got {self.K}")
        if self.fake_batch < 2:
            raise ValueError("fake batch needs at least 2 samples for batch statistics")
        L.LossWeights(self.alpha, self.beta, self.tau, self.gamma)

    @property
    def weights(self) -> L.LossWeights:
        return L.LossWeights(self.alpha, self.beta, self.tau, self.gamma)

    @property
    def ipsm_active(self) -> bool:
        # a single patch means no positional self-supervision
        return self.use_ipsm and self.K > 1 and not self.transfer_only

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in dataclasses.fields(self))

    @classmethod
    def from_text(cls, text: str) -> "AdaptConfig":
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        kwargs = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"line {lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ValueError(f"line {lineno}: unknown key {key!r}")
            kwargs[key] = _parse_value(value, types[key])
        return cls(**kwargs)

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path: str | os.PathLike) -> "AdaptConfig":
        return cls.from_text(Path(path).read_text())


def _parse_value(value: str, typ: str):
    if typ == "bool":
        if value.lower() in ("true", "1", "yes"):
            return True
        if value.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if typ == "int":
        return int(value)
    if typ == "float":
        return float(value)
    return value


@dataclass
class TrainState:
    config: AdaptConfig
    frozen: SegModel
    shared: SegModel
    gen: Generator
    disc: PatchDiscriminator | None
    dam: DualAttention
    opt_seg: torch.optim.Optimizer
    opt_gen: torch.optim.Optimizer
    opt_disc: torch.optim.Optimizer | None
    snapshot: list
    rng: torch.Generator
    iteration: int = 0
    max_iter: int = 1
    history: list = field(default_factory=list)
    # fake batch from the last transfer step, reused by the adaptation step
    fake: torch.Tensor | None = None
    fake_prob: torch.Tensor | None = None
    fake_attn: object = None


def _seeded(seed: int, fn):
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return fn()


def init_state(config: AdaptConfig, source: SegModel) -> TrainState:
    """Frozen copy of ``source``, shared model, generator and discriminator.

    Each network is initialised from its own seed so switching a component
    off does not perturb the others.
    """
    if config.deterministic:
        set_determinism(config.seed)
    C = source.num_classes
    frozen = freeze(copy.deepcopy(source))
    if config.transfer_only:
        shared = _seeded(config.seed * 4 + 1, lambda: SegModel(C, source.enc_channels, source.dec_channels))
    else:
        shared = copy.deepcopy(source)
    for p in shared.parameters():
        p.requires_grad_(True)
    shared.train(config.shared_bn_train)

    gen = _seeded(config.seed * 4 + 2, lambda: Generator(config.latent_dim, config.fake_size))
    gen.train()
    disc = opt_disc = None
    if config.ipsm_active:
        disc = _seeded(config.seed * 4 + 3, lambda: PatchDiscriminator(C, config.K**2, config.embed_dim))
        disc.train()
        opt_disc = torch.optim.Adam(disc.parameters(), lr=config.disc_lr, betas=(0.5, 0.999))
    n_pos = (config.fake_size // source.stride) ** 2
    dam = DualAttention(source.feature_channels, n_pos, config.dam_init)
    for p in dam.parameters():
        p.requires_grad_(False)

    opt_seg = torch.optim.SGD(
        shared.parameters(), lr=config.seg_lr, momentum=config.momentum,
        weight_decay=config.weight_decay, nesterov=True,
    )
    opt_gen = torch.optim.Adam(gen.parameters(), lr=config.gen_lr, betas=(0.5, 0.999))
    rng = torch.Generator().manual_seed(config.seed * 4)
    return TrainState(
        config, frozen, shared, gen, disc, dam, opt_seg, opt_gen, opt_disc,
        bn_snapshot(frozen), rng,
    )


@contextmanager
def batch_statistics(model: nn.Module) -> Iterator[None]:
    """Normalise with batch statistics without touching any BN buffer."""
    layers = [m for _, m in bn_layers(model)]
    saved = [(m.training, m.track_running_stats) for m in layers]
    for m in layers:
        m.train()
        m.track_running_stats = False
    try:
        yield
    finally:
        for m, (training, track) in zip(layers, saved):
            m.train(training)
            m.track_running_stats = track


def frozen_forward(state: TrainState, x: torch.Tensor):
    if state.config.frozen_bn_eval:
        return seg_forward(state.frozen, x)
    with batch_statistics(state.frozen):
        return seg_forward(state.frozen, x)


def _value(t) -> float:
    return float(t.detach()) if torch.is_tensor(t) else float(t)


def _check_record(record: dict) -> dict:
    for v in record.values():
        if isinstance(v, float) and not math.isfinite(v):
            raise NumericalAbort(record)
    return record


def _require_finite(state: TrainState, **tensors) -> None:
    for name, t in tensors.items():
        if not torch.isfinite(t).all():
            raise NumericalAbort({"iteration": state.iteration + 1, "error": f"non-finite {name}"})


def _step_lrs(state: TrainState) -> None:
    cfg = state.config
    frac = (state.iteration, state.max_iter, cfg.poly_power)
    set_lr(state.opt_seg, poly_lr(cfg.seg_lr, *frac))
    set_lr(state.opt_gen, poly_lr(cfg.gen_lr, *frac))
    if state.opt_disc is not None:
        set_lr(state.opt_disc, poly_lr(cfg.disc_lr, *frac))


def knowledge_transfer_step(state: TrainState, target: torch.Tensor) -> dict:
    """Generator step then shared-model distillation step on fresh fakes."""
    cfg, w = state.config, state.config.weights
    _step_lrs(state)
    z = torch.randn(cfg.fake_batch, cfg.latent_dim, generator=state.rng)

    # (a) generator: match source BN statistics, maximise frozen/shared
    # discrepancy, pull fake attention towards target attention
    fake = state.gen(z)
    rec = BNStatsRecorder(state.frozen)
    with no_param_grad(state.shared):
        if cfg.use_bns:
            with rec:
                feat_f, prob_f = frozen_forward(state, fake)
        else:
            feat_f, prob_f = frozen_forward(state, fake)
        feat_s, prob_s = seg_forward(state.shared, fake)
    _require_finite(state, fake=fake, frozen_features=feat_f, shared_features=feat_s, shared_probs=prob_s)
    mae = L.mae_loss(prob_s, prob_f, detach_frozen=False)
    bns = L.bns_loss(rec.stats, state.snapshot) if cfg.use_bns else torch.zeros(())
    if cfg.use_dad:
        A_f = state.dam(feat_f)
        dad_ss = L.dad_ss_loss(A_f, state.dam(feat_s), detach_frozen=False)
        with torch.no_grad():
            feat_t = state.shared.encode(target)
            _require_finite(state, target_features=feat_t)
            A_t = state.dam(adapt_pool(feat_t, feat_f.shape[-2:]))
        dad_st = L.dad_st_loss(A_f.spatial, A_f.channel, A_t.spatial, A_t.channel)
    else:
        dad_ss = dad_st = torch.zeros(())
    g_loss = L.generator_objective(bns, mae, dad_ss, dad_st, w)
    state.opt_gen.zero_grad()
    g_loss.backward()
    state.opt_gen.step()

    # (b) shared model distils from the frozen model on regenerated fakes
    with torch.no_grad():
        fake = state.gen(z)
        feat_f, prob_f = frozen_forward(state, fake)
        _require_finite(state, fake=fake, frozen_features=feat_f)
        A_f = state.dam(feat_f) if cfg.use_dad else None
    feat_s, prob_s = seg_forward(state.shared, fake)
    _require_finite(state, shared_features=feat_s, shared_probs=prob_s)
    s_mae = L.mae_loss(prob_s, prob_f)
    s_dad = L.dad_ss_loss(A_f, state.dam(feat_s)) if cfg.use_dad else torch.zeros(())
    s_loss = L.transfer_objective(s_mae, s_dad, w)
    state.opt_seg.zero_grad()
    s_loss.backward()
    state.opt_seg.step()
    state.fake, state.fake_prob, state.fake_attn = fake, prob_f, A_f

    record = {"mae": _value(mae), "gen_obj": _value(g_loss), "transfer_mae": _value(s_mae), "transfer_obj": _value(s_loss)}
    if cfg.use_bns:
        record["bns"] = _value(bns)
    if cfg.use_dad:
        record.update(dad_ss=_value(dad_ss), dad_st=_value(dad_st), transfer_dad_ss=_value(s_dad))
    return _check_record(record)


def model_adaptation_step(state: TrainState, target: torch.Tensor) -> dict:
    """Self-supervised step on the shared model, then the discriminator step."""
    cfg, w = state.config, state.config.weights
    if target.shape[0] % 2:
        raise ValueError(f"target batch must be even, got {target.shape[0]}")
    if state.fake is None:
        raise RuntimeError("model_adaptation_step needs a preceding knowledge_transfer_step")

    prob_t = state.shared(target).softmax(dim=1)
    _require_finite(state, target_probs=prob_t)
    tar = L.max_square_loss(prob_t)
    adv_t = torch.zeros(())
    if cfg.ipsm_active:
        patches = split_into_patches(prob_t, cfg.K)
        split = rank_easy_hard(patch_entropy(patches.detach()))
        easy, k_easy, hard, k_hard = split.gather(patches)
        with no_param_grad(state.disc):
            adv_t = L.adv_loss_T_logits(state.disc(hard, k_hard))

    feat_s, prob_s = seg_forward(state.shared, state.fake)
    mae = L.mae_loss(prob_s, state.fake_prob)
    dad_ss = L.dad_ss_loss(state.fake_attn, state.dam(feat_s)) if cfg.use_dad else torch.zeros(())
    loss = L.adaptation_objective(tar, mae, dad_ss, adv_t, w)
    state.opt_seg.zero_grad()
    loss.backward()
    state.opt_seg.step()

    record = {"tar": _value(tar), "adapt_mae": _value(mae), "adapt_obj": _value(loss)}
    if cfg.use_dad:
        record["adapt_dad_ss"] = _value(dad_ss)
    if cfg.ipsm_active:
        d_loss = L.adv_loss_D_logits(state.disc(easy.detach(), k_easy), state.disc(hard.detach(), k_hard))
        state.opt_disc.zero_grad()
        d_loss.backward()
        state.opt_disc.step()
        record.update(adv_t=_value(adv_t), adv_d=_value(d_loss))
    return _check_record(record)


def train_iteration(state: TrainState, target: torch.Tensor) -> dict:
    record = {"iteration": state.iteration + 1}
    record.update(knowledge_transfer_step(state, target))
    if not state.config.transfer_only:
        record.update(model_adaptation_step(state, target))
    state.iteration += 1
    return record


LOSS_COLUMNS = (
    "bns", "mae", "dad_ss", "dad_st", "gen_obj", "transfer_mae", "transfer_dad_ss", "transfer_obj",
    "tar", "adapt_mae", "adapt_dad_ss", "adv_t", "adapt_obj", "adv_d",
)


def write_history(history: list[dict], path: str | os.PathLike) -> None:
    present = {k for row in history for k in row}
    cols = ["iteration", "epoch", *(c for c in LOSS_COLUMNS if c in present), "miou", "mpa"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
        writer.writeheader()
        for row in history:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def read_history(path: str | os.PathLike) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for row in rows:
        out.append({k: (int(v) if k in ("iteration", "epoch") else float(v)) for k, v in row.items() if v != ""})
    return out


@dataclass
class AdaptResult:
    model: SegModel
    best_model: SegModel
    best_miou: float
    history: list
    state: TrainState


STATE_FILE = "train_state.pt"


def _save_train_state(state: TrainState, epoch: int, best, out_dir: Path, order_rng_state) -> None:
    payload = {
        "epoch": epoch,
        "iteration": state.iteration,
        "history": state.history,
        "shared": state.shared.state_dict(),
        "gen": state.gen.state_dict(),
        "disc": state.disc.state_dict() if state.disc is not None else None,
        "opt_seg": state.opt_seg.state_dict(),
        "opt_gen": state.opt_gen.state_dict(),
        "opt_disc": state.opt_disc.state_dict() if state.opt_disc is not None else None,
        "rng": state.rng.get_state(),
        "order_rng": order_rng_state,
        "best": best,
        "fake": (state.fake, state.fake_prob, state.fake_attn),
    }
    torch.save(payload, out_dir / STATE_FILE)


def _load_train_state(state: TrainState, path: Path) -> dict:
    payload = torch.load(path, weights_only=False)
    state.shared.load_state_dict(payload["shared"])
    state.gen.load_state_dict(payload["gen"])
    if state.disc is not None:
        state.disc.load_state_dict(payload["disc"])
        state.opt_disc.load_state_dict(payload["opt_disc"])
    state.opt_seg.load_state_dict(payload["opt_seg"])
    state.opt_gen.load_state_dict(payload["opt_gen"])
    state.rng.set_state(payload["rng"])
    state.iteration = payload["iteration"]
    state.history = payload["history"]
    state.fake, state.fake_prob, state.fake_attn = payload["fake"]
    return payload


def run_adaptation(
    config: AdaptConfig,
    source_ckpt: str | os.PathLike | SegModel,
    target_train: DatasetManifest,
    target_test: DatasetManifest | None = None,
    out_dir: str | os.PathLike | None = None,
    resume: bool = False,
) -> AdaptResult:
    """Adapt a source checkpoint to an unlabelled target split.

    Only target images are read for training; target-test labels are used for
    the per-epoch evaluation. Nothing under a source split is accessed.
    """
    source = source_ckpt if isinstance(source_ckpt, SegModel) else load_checkpoint(source_ckpt)[0]
    spec = target_train.spec
    divisors = (source.stride, config.K) if config.ipsm_active else (source.stride,)
    spec.validate(divisors)
    state = init_state(config, source)
    C = source.num_classes

    x_train, _ = load_split(target_train)  # labels are discarded
    x_train = torch.from_numpy(x_train)
    test = load_split(target_test) if target_test is not None else None
    B = config.batch_size
    per_epoch = config.iters_per_epoch or len(x_train) // B
    if len(x_train) < B and config.epochs > 0:
        raise ValueError(f"target split has {len(x_train)} images, fewer than batch size {B}")
    state.max_iter = config.epochs * per_epoch
    order_rng = np.random.default_rng(config.seed)

    def eval_row(epoch: int) -> dict:
        row = {"iteration": state.iteration, "epoch": epoch}
        if test is not None:
            s = evaluate(state.shared, *test, C)
            row.update(miou=s.miou, mpa=s.mpa)
        return row

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        config.save(out / "config.txt")

    start_epoch = 0
    best = None
    if resume and out is not None and (out / STATE_FILE).exists():
        payload = _load_train_state(state, out / STATE_FILE)
        start_epoch = payload["epoch"]
        order_rng.bit_generator.state = payload["order_rng"]
        best = payload["best"]
        log.info("resumed at epoch %d (iteration %d)", start_epoch, state.iteration)
    else:
        row = eval_row(0)
        state.history.append(row)
        best = (row.get("miou", -1.0), copy.deepcopy(state.shared.state_dict()))

    pool: list[int] = []
    for epoch in range(start_epoch + 1, config.epochs + 1):
        for _ in range(per_epoch):
            if len(pool) < B:
                pool = pool + list(order_rng.permutation(len(x_train)))
            idx, pool = pool[:B], pool[B:]
            record = train_iteration(state, x_train[idx])
            record["epoch"] = epoch
            state.history.append(record)
        pool = []
        row = eval_row(epoch)
        state.history[-1].update({k: v for k, v in row.items() if k in ("miou", "mpa")})
        log.info("epoch %d iteration %d mIoU %s", epoch, state.iteration, row.get("miou"))
        if row.get("miou", -1.0) > best[0]:
            best = (row["miou"], copy.deepcopy(state.shared.state_dict()))
        if out is not None:
            _save_train_state(state, epoch, best, out, order_rng.bit_generator.state)

    best_model = copy.deepcopy(state.shared)
    best_model.load_state_dict(best[1])
    if out is not None:
        save_checkpoint(state.shared, out / "last", epoch=config.epochs, seed=config.seed)
        save_checkpoint(best_model, out / "best", epoch=config.epochs, seed=config.seed, target_test_miou=best[0])
        save_checkpoint(state.gen, out / "generator", epoch=config.epochs, seed=config.seed)
        if state.disc is not None:
            save_checkpoint(state.disc, out / "discriminator", epoch=config.epochs, seed=config.seed)
        write_history(state.history, out / "history.csv")
    return AdaptResult(state.shared, best_model, best[0], state.history, state)
