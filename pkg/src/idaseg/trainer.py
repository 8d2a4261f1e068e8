"""Training orchestration: pretraining, adaptation, checkpointing.

Pretraining fits the backbone on labeled source images (optionally with
source-only square mixing and a source-prototype contrastive term) and
keeps the parameters that scored the best source-validation Dice.

Adaptation runs the teacher-student loop: the teacher pseudo-labels the
target images, the mixing module builds intermediate images, the
student trains on masked supervised + consistency + contrastive terms,
and the teacher tracks the student by exponential moving average.
Component toggles reduce the loop to plain self-training or to nothing
at all (baseline), which is how the ablation arms are produced.

One optimizer step consumes ``batch_size`` intermediate images, built
from ``batch_size / 2`` quad draws (each quad yields one image per
mixing direction).
"""

from __future__ import annotations

import copy
import csv
import json
import logging
import subprocess
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .config import NumericError, RunConfig
from .data import (
    ImageSample,
    PreprocessConfig,
    QuadBatch,
    augment,
    random_crop,
    resize_label,
    resize_whole,
    sample_quad,
    to_grayscale,
)
from .idcl import (
    ContrastConfig,
    PrototypeBank,
    batch_class_prototype,
    confidence_weight,
    contrastive_loss,
    init_prototypes,
    update_prototypes,
)
from .losses import (
    LossReport,
    LossWeights,
    masked_consistency,
    masked_cross_entropy,
    masked_dice,
    total_loss,
)
from .metrics import dice as dice_score
from .models import (
    NetworkConfig,
    WNet,
    build_model,
    clone_model,
    ema_update,
    predict_sample,
    to_tensor,
)
from .mrat import (
    consistency_region,
    make_cutmix_mask,
    compose_image,
    compose_label,
    make_intermediate_batch,
    supervised_region,
)

log = logging.getLogger(__name__)

LOSS_LOG_COLUMNS = (
    "iteration", "cls", "dice", "idcl_t2s", "idcl_s2t", "con", "total", "w_t2s", "w_s2t",
)


@dataclass
class TrainState:
    student: WNet
    teacher: WNet
    optimizer: torch.optim.AdamW
    rng: np.random.Generator
    bank: PrototypeBank | None = None
    iteration: int = 0
    all_bg_steps: int = 0  # steps whose pseudo-labels were all background
    total_steps: int = 0
    _warned_degenerate: bool = field(default=False, repr=False)


def make_preprocess(cfg: RunConfig) -> PreprocessConfig:
    return PreprocessConfig(
        train_size=(cfg.train_size, cfg.train_size),
        horizontal_flip=cfg.hflip,
        vertical_flip=cfg.vflip,
        color_jitter=cfg.jitter,
    )


def make_network_config(cfg: RunConfig) -> NetworkConfig:
    return NetworkConfig(
        depth=cfg.depth, base_channels=cfg.base_channels, num_classes=cfg.num_classes
    )


def make_contrast_config(cfg: RunConfig) -> ContrastConfig:
    return ContrastConfig(delta=cfg.delta, tau=cfg.tau, th_t2s=cfg.th_t2s, th_s2t=cfg.th_s2t)


def make_optimizer(model: WNet, cfg: RunConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(
        model.parameters(), lr=cfg.lr, betas=cfg.betas, weight_decay=cfg.weight_decay
    )


def set_lr(optimizer: torch.optim.Optimizer, cfg: RunConfig, it: int, total: int):
    if cfg.lr_schedule == "poly" and total > 0:
        lr = cfg.lr * (1.0 - min(it, total) / total) ** 0.9
    else:
        lr = cfg.lr
    for group in optimizer.param_groups:
        group["lr"] = lr


def _labels_to_tensor(labels: list[np.ndarray]) -> torch.Tensor:
    return torch.from_numpy(np.stack(labels)).long()


def _planes_to_tensor(planes: list[np.ndarray]) -> torch.Tensor:
    return torch.from_numpy(np.stack(planes).astype(np.float64))


def _check_finite(value: torch.Tensor):
    if not torch.isfinite(value).all():
        raise NumericError(f"non-finite training loss: {float(value)}")


def _val_dice(model: WNet, samples: list[ImageSample], eval_size: tuple[int, int]) -> float:
    scores = []
    for s in samples:
        probs = predict_sample(model, s, eval_size)
        scores.append(dice_score(probs > 0.5, s.label))
    return float(np.mean(scores))


def split_validation(source: list[ImageSample], fraction: float = 0.1) -> tuple[list, list]:
    """Deterministic tail split of the id-sorted source list."""
    n_val = max(1, round(len(source) * fraction)) if len(source) > 1 else 0
    if n_val == 0:
        return list(source), []
    return source[:-n_val], source[-n_val:]


# ---------------------------------------------------------------------------
# pretraining


@dataclass
class PretrainState:
    model: WNet
    optimizer: torch.optim.AdamW
    rng: np.random.Generator
    bank: PrototypeBank | None = None
    iteration: int = 0
    best_dice: float = -1.0
    best_iteration: int = 0
    best_params: dict = field(default_factory=dict, repr=False)


def pretrain(
    source: list[ImageSample],
    cfg: RunConfig,
    strategy: str | None = None,
    log_path: str | Path | None = None,
    resume: str | Path | None = None,
    state_path: str | Path | None = None,
) -> tuple[WNet, list[dict]]:
    """Supervised source training; returns the best-validation model.

    Strategies: "random" is plain supervised training on resized and
    cropped source images; "self_cut" composes each input from a source
    patch pasted into a resized source image (labels composed the same
    way); "vcl" adds a source-prototype contrastive term with online
    confidence-weighted prototype updates; "self_cut+vcl" is both.

    Pass ``resume`` to continue an interrupted run from its state file;
    ``state_path`` keeps a resumable state checkpoint up to date.
    """
    strategy = strategy or cfg.pretrain_strategy
    if strategy not in ("random", "self_cut", "vcl", "self_cut+vcl"):
        raise ValueError(f"unknown pretraining strategy {strategy!r}")
    use_self_cut = "self_cut" in strategy
    use_vcl = "vcl" in strategy
    if not source:
        raise ValueError("pretraining needs labeled source samples")

    if resume is not None:
        state = load_pretrain_state(resume)
    else:
        model = build_model(make_network_config(cfg), seed=cfg.seed)
        state = PretrainState(
            model=model,
            optimizer=make_optimizer(model, cfg),
            rng=np.random.default_rng(cfg.seed),
            best_params=copy.deepcopy(model.state_dict()),
        )
    model, optimizer, rng = state.model, state.optimizer, state.rng
    model.train()
    pre = make_preprocess(cfg)
    ccfg = make_contrast_config(cfg)
    train_pool, val_pool = split_validation(source)
    eval_size = (cfg.train_size, cfg.train_size)
    eval_stride = max(1, cfg.pretrain_iterations // 10)
    history: list[dict] = []

    def draw_input(slot: int):
        s = train_pool[int(rng.integers(0, len(train_pool)))]
        if use_self_cut:
            whole = resize_whole(to_grayscale(s, pre), pre)
            s2 = train_pool[int(rng.integers(0, len(train_pool)))]
            patch = random_crop(to_grayscale(s2, pre), pre, rng)
            h, w = whole.shape
            mask = make_cutmix_mask(w, h, cfg.m, rng, source_of_ones="sp")
            img = compose_image(whole.pixels, patch.pixels, mask)
            lab = compose_label(whole.label, patch.label, mask)
            sample = ImageSample(pixels=img, label=lab, domain=s.domain, id=s.id)
        elif slot % 2 == 0:
            sample = resize_whole(to_grayscale(s, pre), pre)
        else:
            sample = random_crop(to_grayscale(s, pre), pre, rng)
        sample = augment(sample, pre, rng)
        return sample.pixels, sample.label

    while state.iteration < cfg.pretrain_iterations:
        it = state.iteration
        set_lr(optimizer, cfg, it, cfg.pretrain_iterations)
        images, labels = zip(*(draw_input(i) for i in range(cfg.batch_size)))
        x = to_tensor(np.stack(images))
        y = _labels_to_tensor(list(labels))
        out = model(x)
        ones = np.ones(images[0].shape, dtype=np.float64)
        loss = masked_cross_entropy(out.probabilities, y, ones) + masked_dice(
            out.probabilities, y, ones
        )
        if use_vcl:
            fh, fw = out.features.shape[-2:]
            labels_ds = _labels_to_tensor([resize_label(lab, (fw, fh)) for lab in labels])
            stats = [batch_class_prototype(out.features, labels_ds, r)
                     for r in range(cfg.num_classes)]
            if state.bank is None:
                if all(n > 0 for _, n in stats):
                    state.bank = PrototypeBank(vectors=np.stack([v for v, _ in stats]))
            else:
                loss = loss + cfg.beta2 * contrastive_loss(
                    out.features, labels_ds, state.bank, ccfg)
                w = confidence_weight(out.probabilities, ccfg.th_s2t)
                empty = [(None, 0)] * cfg.num_classes
                state.bank = update_prototypes(state.bank, empty, stats, (0.0, w))
        _check_finite(loss)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        state.iteration += 1

        if val_pool and (state.iteration % eval_stride == 0
                         or state.iteration == cfg.pretrain_iterations):
            vd = _val_dice(model, val_pool, eval_size)
            history.append({"iteration": state.iteration, "loss": float(loss.item()),
                            "val_dice": vd})
            if vd > state.best_dice:
                state.best_dice = vd
                state.best_iteration = state.iteration
                state.best_params = copy.deepcopy(model.state_dict())
            model.train()
        if state_path is not None and (state.iteration % cfg.checkpoint_every == 0
                                       or state.iteration == cfg.pretrain_iterations):
            save_pretrain_state(state_path, state, cfg)

    best = clone_model(model)
    if state.best_dice >= 0 and state.best_params:
        best.load_state_dict(state.best_params)
        log.info("pretrain: kept iteration %d (val dice %.4f)",
                 state.best_iteration, state.best_dice)
    if log_path is not None:
        _write_history_csv(history, log_path, ("iteration", "loss", "val_dice"))
    best.iteration = cfg.pretrain_iterations
    return best, history


# ---------------------------------------------------------------------------
# adaptation


def init_adaptation(
    pretrained: WNet, source: list[ImageSample], cfg: RunConfig, rng: np.random.Generator
) -> TrainState:
    student = clone_model(pretrained)
    teacher = clone_model(pretrained)
    bank = None
    if cfg.idcl and cfg.mrat and cfg.self_training:
        bank = init_prototypes(student, source, (cfg.train_size, cfg.train_size),
                               num_classes=cfg.num_classes)
    return TrainState(student=student, teacher=teacher, optimizer=make_optimizer(student, cfg),
                      rng=rng, bank=bank)


def _teacher_view(teacher: WNet, image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Teacher probabilities and argmax pseudo-label for one image."""
    teacher.eval()
    with torch.no_grad():
        probs = teacher(to_tensor(image)).probabilities[0].numpy()
    return probs, np.argmax(probs, axis=0).astype(np.int64)


def adapt_step(state: TrainState, quads: list[QuadBatch], cfg: RunConfig) -> LossReport:
    """One optimizer step over the quads' intermediate images.

    With mixing disabled the step falls back to plain self-training:
    supervised loss on the source slots (ground truth) and the target
    slots (teacher pseudo-labels), no consistency term. The contrastive
    term needs intermediate images, so it is skipped without them.
    """
    if not cfg.self_training:
        return LossReport(0.0, 0.0, 0.0, 0.0, 0.0, 0.0)
    weights = LossWeights(beta1=cfg.beta1, beta2=cfg.beta2, gamma=cfg.gamma)
    ccfg = make_contrast_config(cfg)
    student, teacher = state.student, state.teacher
    student.train()
    set_lr(state.optimizer, cfg, state.iteration, cfg.iterations)

    zero = torch.zeros((), dtype=torch.float64)
    all_bg = True

    if cfg.mrat:
        streams: dict[str, dict[str, list]] = {
            d: {"x": [], "y": [], "sup": [], "con": [], "p_teacher": []}
            for d in ("t2s", "s2t")
        }
        for quad in quads:
            p_tr, pl_tr = _teacher_view(teacher, quad.tr.pixels)
            p_tp, pl_tp = _teacher_view(teacher, quad.tp.pixels)
            all_bg = all_bg and pl_tr.max() == 0 and pl_tp.max() == 0
            pair = make_intermediate_batch(quad, pl_tr, pl_tp, cfg.m, cfg.strategy, state.rng)
            for d, x, y, mask, p_t in (
                ("t2s", pair.x_t2s, pair.y_t2s, pair.mask_t2s, p_tp),
                ("s2t", pair.x_s2t, pair.y_s2t, pair.mask_s2t, p_tr),
            ):
                if x is None:
                    continue
                streams[d]["x"].append(x)
                streams[d]["y"].append(y)
                streams[d]["sup"].append(supervised_region(d, mask).astype(np.float64))
                streams[d]["con"].append(consistency_region(d, mask).astype(np.float64))
                streams[d]["p_teacher"].append(p_t)

        cls_terms, dice_terms, con_terms = [], [], []
        idcl_terms = {"t2s": zero, "s2t": zero}
        step_weights = {"t2s": 0.0, "s2t": 0.0}
        batch_stats = {}
        outs = {}
        for d in ("t2s", "s2t"):
            if not streams[d]["x"]:
                continue
            x = to_tensor(np.stack(streams[d]["x"]))
            y = _labels_to_tensor(streams[d]["y"])
            out = student(x)
            outs[d] = out
            cls_terms.append(masked_cross_entropy(
                out.probabilities, y, np.stack(streams[d]["sup"])))
            dice_terms.append(masked_dice(
                out.probabilities, y, np.stack(streams[d]["sup"])))
            p_teacher = _planes_to_tensor(streams[d]["p_teacher"])
            con_terms.append(masked_consistency(
                out.probabilities, p_teacher, np.stack(streams[d]["con"])))
            if cfg.idcl and state.bank is not None:
                th = ccfg.th_t2s if d == "t2s" else ccfg.th_s2t
                step_weights[d] = confidence_weight(out.probabilities, th)
                fh, fw = out.features.shape[-2:]
                labels_ds = _labels_to_tensor(
                    [resize_label(lab, (fw, fh)) for lab in streams[d]["y"]])
                batch_stats[d] = (
                    [batch_class_prototype(out.features, labels_ds, r)
                     for r in range(cfg.num_classes)],
                    labels_ds,
                )
        if cfg.idcl and state.bank is not None and batch_stats:
            empty = [(None, 0)] * cfg.num_classes
            state.bank = update_prototypes(
                state.bank,
                batch_stats.get("t2s", (empty, None))[0],
                batch_stats.get("s2t", (empty, None))[0],
                (step_weights["t2s"], step_weights["s2t"]),
            )
            for d in ("t2s", "s2t"):
                if d in batch_stats:
                    idcl_terms[d] = contrastive_loss(
                        outs[d].features, batch_stats[d][1], state.bank, ccfg)
        n = len(cls_terms)
        report = total_loss(
            sum(cls_terms) / n,
            sum(dice_terms) / n,
            idcl_terms["t2s"],
            idcl_terms["s2t"],
            sum(con_terms) / n,
            weights,
        )
    else:
        # plain self-training on unmixed slots
        images, labels = [], []
        for quad in quads:
            for s in (quad.sr, quad.sp):
                images.append(s.pixels)
                labels.append(s.label)
            for s in (quad.tr, quad.tp):
                _, pl = _teacher_view(teacher, s.pixels)
                all_bg = all_bg and pl.max() == 0
                images.append(s.pixels)
                labels.append(pl)
        x = to_tensor(np.stack(images))
        y = _labels_to_tensor(labels)
        out = student(x)
        ones = np.ones(images[0].shape, dtype=np.float64)
        report = total_loss(
            masked_cross_entropy(out.probabilities, y, ones),
            masked_dice(out.probabilities, y, ones),
            zero, zero, zero, weights,
        )

    _check_finite(report.total)
    state.optimizer.zero_grad()
    report.total.backward()
    state.optimizer.step()
    ema_update(teacher, student, cfg.ema_momentum)
    state.iteration += 1
    state.total_steps += 1
    if all_bg:
        state.all_bg_steps += 1
    if (state.total_steps >= 20
            and state.all_bg_steps > 0.95 * state.total_steps
            and not state._warned_degenerate):
        warnings.warn(
            "degenerate adaptation: pseudo-labels were all background in "
            f"{state.all_bg_steps}/{state.total_steps} steps", stacklevel=2)
        state._warned_degenerate = True
    return report.detached()


def adapt_loop(
    source: list[ImageSample],
    target_train: list[ImageSample],
    cfg: RunConfig,
    pretrained: WNet,
    target_eval: list[ImageSample] | None = None,
    out_dir: str | Path | None = None,
    resume: str | Path | None = None,
) -> tuple[TrainState, list[dict]]:
    """Run the adaptation loop for cfg.iterations steps.

    Held-out labeled target samples are evaluated periodically for
    reporting only. With self-training disabled the loop is a no-op and
    the returned models equal the pretrained input. Writes per-step
    loss rows and periodic checkpoints when out_dir is given; pass
    ``resume`` to continue an interrupted run from its checkpoint.
    """
    if cfg.idcl and not cfg.mrat and cfg.self_training:
        warnings.warn("contrastive alignment needs intermediate images; "
                      "disabled because mixing is off", stacklevel=2)
    if not cfg.self_training and (cfg.mrat or cfg.idcl):
        warnings.warn("self-training is off: adaptation is a no-op and other "
                      "components are ignored", stacklevel=2)

    if resume is not None:
        state = load_train_state(resume, cfg)
    else:
        state = init_adaptation(pretrained, source, cfg, np.random.default_rng(cfg.seed + 1))

    out_dir = Path(out_dir) if out_dir is not None else None
    loss_rows: list[dict] = []
    history: list[dict] = []
    pre = make_preprocess(cfg)
    eval_size = (cfg.eval_size, cfg.eval_size)
    n_quads = cfg.batch_size // 2

    def evaluate(it: int):
        if not target_eval:
            return
        model = state.teacher
        scores = [dice_score(predict_sample(model, s, eval_size) > 0.5, s.label)
                  for s in target_eval]
        history.append({"iteration": it, "target_dice": float(np.mean(scores))})

    while state.iteration < cfg.iterations and cfg.self_training:
        quads = [sample_quad(source, target_train, pre, state.rng, cfg.input_mode)
                 for _ in range(n_quads)]
        report = adapt_step(state, quads, cfg)
        row = {
            "iteration": state.iteration,
            "cls": report.cls, "dice": report.dice,
            "idcl_t2s": report.idcl_t2s, "idcl_s2t": report.idcl_s2t,
            "con": report.con, "total": report.total,
            "w_t2s": state.bank.last_weights[0] if state.bank else 0.0,
            "w_s2t": state.bank.last_weights[1] if state.bank else 0.0,
        }
        loss_rows.append(row)
        if state.iteration % cfg.eval_every == 0 or state.iteration == cfg.iterations:
            evaluate(state.iteration)
        if out_dir is not None and (state.iteration % cfg.checkpoint_every == 0
                                    or state.iteration == cfg.iterations):
            save_train_state(out_dir / "adapt_last.ckpt", state, cfg)
    if not cfg.self_training:
        evaluate(0)

    if out_dir is not None:
        _write_history_csv(loss_rows, out_dir / "losses.csv", LOSS_LOG_COLUMNS)
        if history:
            _write_history_csv(history, out_dir / "eval_history.csv",
                               ("iteration", "target_dice"))
        save_train_state(out_dir / "adapt_last.ckpt", state, cfg)
    return state, history


# ---------------------------------------------------------------------------
# persistence


def _model_arrays(prefix: str, model: WNet) -> dict[str, np.ndarray]:
    return {f"{prefix}/{name}": p.detach().numpy().copy()
            for name, p in model.named_parameters()}


def _load_model_arrays(prefix: str, arrays: dict, model: WNet):
    with torch.no_grad():
        for name, p in model.named_parameters():
            key = f"{prefix}/{name}"
            if key not in arrays:
                raise CheckpointError(f"checkpoint missing parameter {key}")
            p.copy_(torch.from_numpy(arrays[key]))


def save_pretrained(path: str | Path, model: WNet, cfg: RunConfig) -> Path:
    ckpt = Checkpoint(
        arrays=_model_arrays("student", model),
        meta={
            "kind": "pretrain",
            "config": cfg.to_dict(),
            "iteration": model.iteration,
            "network": {"stage2_input": "stage1 logits + image"},
        },
    )
    return save_checkpoint(path, ckpt)


def load_pretrained(path: str | Path, cfg: RunConfig | None = None) -> tuple[WNet, RunConfig]:
    ckpt = load_checkpoint(path)
    stored = RunConfig.from_dict(ckpt.meta["config"])
    cfg = cfg or stored
    model = build_model(make_network_config(stored))
    _load_model_arrays("student", ckpt.arrays, model)
    model.iteration = int(ckpt.meta.get("iteration", 0))
    return model, cfg


def _optimizer_arrays(model: WNet, optimizer: torch.optim.Optimizer) -> dict[str, np.ndarray]:
    arrays = {}
    for name, p in model.named_parameters():
        opt_state = optimizer.state.get(p, {})
        for key in ("exp_avg", "exp_avg_sq"):
            if key in opt_state:
                arrays[f"opt/{name}/{key}"] = opt_state[key].detach().numpy().copy()
        if "step" in opt_state:
            step = opt_state["step"]
            arrays[f"opt/{name}/step"] = np.asarray(
                float(step.item()) if torch.is_tensor(step) else float(step))
    return arrays


def _restore_optimizer(model: WNet, optimizer: torch.optim.Optimizer, arrays: dict):
    for name, p in model.named_parameters():
        keys = {k: f"opt/{name}/{k}" for k in ("exp_avg", "exp_avg_sq", "step")}
        if keys["exp_avg"] in arrays:
            optimizer.state[p] = {
                "step": torch.tensor(float(arrays[keys["step"]])),
                "exp_avg": torch.from_numpy(arrays[keys["exp_avg"]].copy()),
                "exp_avg_sq": torch.from_numpy(arrays[keys["exp_avg_sq"]].copy()),
            }


def _bank_meta(bank: PrototypeBank) -> dict:
    return {"iteration": bank.iteration, "last_weights": list(bank.last_weights)}


def _bank_from(ckpt: Checkpoint) -> PrototypeBank | None:
    if "bank/vectors" not in ckpt.arrays:
        return None
    bmeta = ckpt.meta.get("bank", {})
    return PrototypeBank(
        vectors=ckpt.arrays["bank/vectors"],
        iteration=int(bmeta.get("iteration", 0)),
        last_weights=tuple(bmeta.get("last_weights", (0.0, 0.0))),
    )


def save_pretrain_state(path: str | Path, state: PretrainState, cfg: RunConfig) -> Path:
    arrays = _model_arrays("student", state.model)
    arrays.update(_optimizer_arrays(state.model, state.optimizer))
    arrays.update({f"best/{k}": v.detach().numpy().copy()
                   for k, v in state.best_params.items()})
    if state.bank is not None:
        arrays["bank/vectors"] = state.bank.vectors.copy()
    arrays["rng/torch"] = torch.get_rng_state().numpy().copy()
    meta = {
        "kind": "pretrain_state",
        "config": cfg.to_dict(),
        "iteration": state.iteration,
        "best_dice": state.best_dice,
        "best_iteration": state.best_iteration,
        "rng_numpy": state.rng.bit_generator.state,
        "network": {"stage2_input": "stage1 logits + image"},
    }
    if state.bank is not None:
        meta["bank"] = _bank_meta(state.bank)
    return save_checkpoint(path, Checkpoint(arrays=arrays, meta=meta))


def load_pretrain_state(path: str | Path) -> PretrainState:
    ckpt = load_checkpoint(path)
    if ckpt.meta.get("kind") != "pretrain_state":
        raise CheckpointError(f"{path} is not a resumable pretraining checkpoint")
    cfg = RunConfig.from_dict(ckpt.meta["config"])
    model = build_model(make_network_config(cfg))
    _load_model_arrays("student", ckpt.arrays, model)
    optimizer = make_optimizer(model, cfg)
    _restore_optimizer(model, optimizer, ckpt.arrays)
    best_params = {
        k[len("best/"):]: torch.from_numpy(v.copy())
        for k, v in ckpt.arrays.items() if k.startswith("best/")
    }
    rng = np.random.default_rng()
    rng.bit_generator.state = ckpt.meta["rng_numpy"]
    torch.set_rng_state(torch.from_numpy(ckpt.arrays["rng/torch"].copy()))
    return PretrainState(
        model=model, optimizer=optimizer, rng=rng, bank=_bank_from(ckpt),
        iteration=int(ckpt.meta["iteration"]),
        best_dice=float(ckpt.meta.get("best_dice", -1.0)),
        best_iteration=int(ckpt.meta.get("best_iteration", 0)),
        best_params=best_params,
    )


def save_train_state(path: str | Path, state: TrainState, cfg: RunConfig) -> Path:
    arrays = {}
    arrays.update(_model_arrays("student", state.student))
    arrays.update(_model_arrays("teacher", state.teacher))
    arrays.update(_optimizer_arrays(state.student, state.optimizer))
    if state.bank is not None:
        arrays["bank/vectors"] = state.bank.vectors.copy()
    arrays["rng/torch"] = torch.get_rng_state().numpy().copy()
    meta = {
        "kind": "train_state",
        "config": cfg.to_dict(),
        "iteration": state.iteration,
        "teacher_iteration": state.teacher.iteration,
        "student_iteration": state.student.iteration,
        "all_bg_steps": state.all_bg_steps,
        "total_steps": state.total_steps,
        "rng_numpy": state.rng.bit_generator.state,
        "network": {"stage2_input": "stage1 logits + image"},
    }
    if state.bank is not None:
        meta["bank"] = _bank_meta(state.bank)
    return save_checkpoint(path, Checkpoint(arrays=arrays, meta=meta))


def load_train_state(path: str | Path, cfg: RunConfig | None = None) -> TrainState:
    ckpt = load_checkpoint(path)
    if ckpt.meta.get("kind") != "train_state":
        raise CheckpointError(f"{path} is not an adaptation checkpoint")
    stored = RunConfig.from_dict(ckpt.meta["config"])
    cfg = cfg or stored
    student = build_model(make_network_config(stored))
    teacher = build_model(make_network_config(stored))
    _load_model_arrays("student", ckpt.arrays, student)
    _load_model_arrays("teacher", ckpt.arrays, teacher)
    student.iteration = int(ckpt.meta.get("student_iteration", 0))
    teacher.iteration = int(ckpt.meta.get("teacher_iteration", 0))
    optimizer = make_optimizer(student, cfg)
    _restore_optimizer(student, optimizer, ckpt.arrays)
    rng = np.random.default_rng()
    rng.bit_generator.state = ckpt.meta["rng_numpy"]
    torch.set_rng_state(torch.from_numpy(ckpt.arrays["rng/torch"].copy()))
    return TrainState(
        student=student, teacher=teacher, optimizer=optimizer, rng=rng,
        bank=_bank_from(ckpt),
        iteration=int(ckpt.meta["iteration"]),
        all_bg_steps=int(ckpt.meta.get("all_bg_steps", 0)),
        total_steps=int(ckpt.meta.get("total_steps", 0)),
    )


# ---------------------------------------------------------------------------
# run artifacts


def git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True, text=True, timeout=10,
            cwd=Path(__file__).resolve().parent,
        )
        if out.returncode == 0:
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return f"idaseg-{__version__}"


def write_manifest(out_dir: str | Path, cfg: RunConfig, seeds: list[int],
                   command: str, extra: dict | None = None) -> Path:
    """Atomically write the immutable run manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "manifest.json"
    payload = {
        "command": command,
        "config": cfg.to_dict(),
        "code_version": git_describe(),
        "seeds": seeds,
        "started_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "out_dir": str(out_dir),
    }
    if extra:
        payload.update(extra)
    tmp = path.with_suffix(".json.tmp")
    with open(tmp, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    tmp.replace(path)
    return path


def _write_history_csv(rows: list[dict], path: str | Path, columns: tuple[str, ...]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in columns})
