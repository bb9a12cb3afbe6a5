"""Maximum-likelihood training for GLOW and Wavelet Flow models."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from flowood import bijections
from flowood import checkpoint as ckpt_io
from flowood.config import TrainConfig
from flowood.distributions import dequantize
from flowood.glow import GlowConfig, GlowModel
from flowood.haar import DETAIL_ORDER, build_pyramid
from flowood.tensor import no_grad
from flowood.waveletflow import WaveletFlowConfig, WaveletFlowModel

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    pass


class Adam:
    """Adam with decoupled weight decay; state is keyed by parameter name."""

    def __init__(self, lr: float, weight_decay: float = 0.0, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.state: dict[str, dict] = {}

    def step(self, named_params) -> None:
        b1, b2 = self.betas
        for name, p in named_params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            st = self.state.get(name)
            if st is None:
                st = self.state[name] = {"m": np.zeros_like(p.data), "v": np.zeros_like(p.data), "t": 0}
            st["t"] += 1
            st["m"] = b1 * st["m"] + (1 - b1) * g
            st["v"] = b2 * st["v"] + (1 - b2) * g * g
            m_hat = st["m"] / (1 - b1 ** st["t"])
            v_hat = st["v"] / (1 - b2 ** st["t"])
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps) - self.lr * self.weight_decay * p.data

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for name, st in self.state.items():
            out[f"optim.m.{name}"] = st["m"]
            out[f"optim.v.{name}"] = st["v"]
            out[f"optim.t.{name}"] = np.array(float(st["t"]))
        return out

    def load_state_tensors(self, tensors: dict) -> None:
        self.state = {}
        for key, value in tensors.items():
            if not key.startswith("optim.m."):
                continue
            name = key[len("optim.m."):]
            self.state[name] = {"m": value.copy(), "v": tensors[f"optim.v.{name}"].copy(),
                                "t": int(tensors[f"optim.t.{name}"])}


def clip_grad_norm(params, max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


# -- model construction -------------------------------------------------------------------


def build_model(cfg: TrainConfig):
    if cfg.model_kind == "glow":
        return GlowModel(GlowConfig(
            image_shape=(cfg.channels, cfg.image_size, cfg.image_size), levels=cfg.levels,
            flows_per_level=cfg.flows_per_level, hidden_channels=cfg.hidden_channels,
            mask_scheme=cfg.mask_scheme, cycle_iterations=cfg.cycle_iterations, seed=cfg.seed))
    return WaveletFlowModel(WaveletFlowConfig(
        image_size=cfg.image_size, channels=cfg.channels, flows_per_level=cfg.flows_per_level,
        hidden_channels=cfg.hidden_channels, seed=cfg.seed))


def model_kind(model) -> str:
    return "waveletflow" if isinstance(model, WaveletFlowModel) else "glow"


def param_groups(model, levels=None) -> dict[str, list]:
    """Parameter groups that are optimized (and clipped) independently."""
    if isinstance(model, WaveletFlowModel):
        selected = range(model.n_levels + 1) if levels is None else levels
        groups = {}
        named = list(model.named_parameters())
        for level in selected:
            prefix = model.section_prefix(level)
            groups[f"level{level}"] = [(n, p) for n, p in named if n.startswith(prefix)]
        return groups
    return {"model": list(model.named_parameters())}


def group_loss(model, group: str, x: np.ndarray):
    if isinstance(model, WaveletFlowModel):
        level = int(group[len("level"):])
        pyr = build_pyramid(x)
        ll = model.level_log_likelihood(level, *model.level_inputs(pyr, level))
        return -(ll + model.level_correction(level)).mean()
    return model.nll_loss(x)


# -- training state -----------------------------------------------------------------------


@dataclass
class TrainState:
    epoch: int
    step: int
    rngs: dict
    optimizer: Adam
    history: list = field(default_factory=list)

    @classmethod
    def fresh(cls, cfg: TrainConfig, groups) -> TrainState:
        rngs = {g: np.random.default_rng([cfg.seed, i]) for i, g in enumerate(sorted(groups))}
        return cls(0, 0, rngs, Adam(cfg.learning_rate, cfg.weight_decay))


def holdout_split(n: int, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    perm = np.random.default_rng([seed, 104729]).permutation(n)
    n_held = int(round(n * fraction))
    if n - n_held < 1:
        n_held = 0
    return np.sort(perm[n_held:]), np.sort(perm[:n_held])


def trainable_modules(model, levels=None) -> list:
    """Modules whose mode a run may toggle; level runs touch only their own flows."""
    if isinstance(model, WaveletFlowModel) and levels is not None:
        return [model.flow(level) for level in levels]
    return [model]


def evaluate(model, images: np.ndarray, seed: int, batch_size: int = 64,
             levels=None) -> tuple[float, float]:
    """Mean (bpd, nll) over ``images`` with a fixed dequantization seed.

    With ``levels`` only those Wavelet Flow levels are scored and the BPD is
    taken over their coefficient count.
    """
    if len(images) == 0:
        return float("nan"), float("nan")
    mods = trainable_modules(model, levels)
    modes = [m.training for m in mods]
    for m in mods:
        m.eval()
    rng = np.random.default_rng([seed, 15485863])
    lls = []
    with no_grad():
        for start in range(0, len(images), batch_size):
            x, _ = dequantize(images[start:start + batch_size], rng=rng)
            if levels is None:
                lls.append(model.log_likelihood(x).data)
            else:
                lls.append(sum(model.per_level_log_likelihood(x, lv).data for lv in levels))
    for m, mode in zip(mods, modes):
        m.train(mode)
    nll = float(-np.concatenate(lls).mean())
    dims = model.num_dims if levels is None else sum(model.coefficient_count(lv) for lv in levels)
    return nll / (dims * math.log(2.0)), nll


def first_nonfinite_layer(model, x: np.ndarray, group: str) -> str:
    found: list[str] = []

    def hook(name, y, ld):
        if not found and (not np.all(np.isfinite(y.data)) or not np.all(np.isfinite(ld.data))):
            found.append(name)

    with no_grad(), bijections.watch_layers(hook):
        try:
            group_loss(model, group, x)
        except (FloatingPointError, ValueError):
            pass
    return found[0] if found else "<loss only>"


def train(model, images: np.ndarray, cfg: TrainConfig, *, state: TrainState | None = None,
          levels=None, checkpoint_path=None, max_epochs: int | None = None):
    """Train ``model`` on uint8 ``images`` (N, C, H, W); returns ``(model, state)``.

    ``state.history`` holds one row per epoch and split with mean BPD and NLL.
    ``levels`` restricts Wavelet Flow training to the named levels.
    """
    images = np.asarray(images)
    if len(images) == 0:
        raise ValueError("training set is empty")
    train_idx, held_idx = holdout_split(len(images), cfg.holdout_fraction, cfg.seed)
    groups = param_groups(model, levels)
    if state is None:
        state = TrainState.fresh(cfg, groups)
    for g in groups:
        if g not in state.rngs:
            state.rngs[g] = np.random.default_rng([cfg.seed, len(state.rngs)])
    mods = trainable_modules(model, levels)
    for m in mods:
        m.train()
    last = cfg.epochs if max_epochs is None else min(cfg.epochs, state.epoch + max_epochs)
    while state.epoch < last:
        for gname, named in groups.items():
            rng = state.rngs[gname]
            order = rng.permutation(train_idx)
            params = [p for _, p in named]
            for start in range(0, len(order), cfg.batch_size):
                batch = images[order[start:start + cfg.batch_size]]
                x, _ = dequantize(batch, rng=rng)
                loss = group_loss(model, gname, x)
                if not np.isfinite(loss.item()):
                    layer = first_nonfinite_layer(model, x, gname)
                    raise NumericalError(
                        f"non-finite loss at epoch {state.epoch}, step {state.step}; "
                        f"first non-finite layer: {layer}")
                for p in params:
                    p.grad = None
                loss.backward()
                clip_grad_norm(params, cfg.grad_clip)
                state.optimizer.step(named)
                state.step += 1
        state.epoch += 1
        for split_name, idx in (("train", train_idx), ("heldout", held_idx)):
            bpd, nll = evaluate(model, images[idx], cfg.seed, levels=levels)
            state.history.append({"epoch": state.epoch, "split": split_name,
                                  "mean_bpd": bpd, "mean_nll": nll})
        log.info("epoch %d: train bpd %.4f", state.epoch, state.history[-2]["mean_bpd"])
        if checkpoint_path and cfg.checkpoint_interval and state.epoch % cfg.checkpoint_interval == 0:
            save_checkpoint(checkpoint_path, model, cfg, state)
    for m in mods:
        m.eval()
    return model, state


def train_level(model: WaveletFlowModel, level: int, images: np.ndarray, cfg: TrainConfig,
                state: TrainState | None = None):
    """Train a single Wavelet Flow level; other levels stay bit-identical."""
    model._check_level(level)
    return train(model, images, cfg, state=state, levels=[level])


# -- persistence --------------------------------------------------------------------------


def to_checkpoint(model, cfg: TrainConfig, state: TrainState | None = None) -> ckpt_io.Checkpoint:
    header = {
        "train_config": cfg.to_dict(),
        "model_config": model.config.to_dict(),
        "detail_order": list(DETAIL_ORDER),
    }
    tensors = dict(model.state_dict())
    if state is not None:
        header.update({
            "epoch": state.epoch,
            "step": state.step,
            "rng": {k: v.bit_generator.state for k, v in state.rngs.items()},
            "history": state.history,
        })
        tensors.update(state.optimizer.state_tensors())
    return ckpt_io.Checkpoint(model_kind(model), header, tensors)


def save_checkpoint(path, model, cfg: TrainConfig, state: TrainState | None = None) -> None:
    ckpt_io.save(path, to_checkpoint(model, cfg, state))


def from_checkpoint(ckpt: ckpt_io.Checkpoint):
    """Rebuild ``(model, cfg, state)``; ``state`` is None when no training state was stored."""
    cfg = TrainConfig(**ckpt.header["train_config"])
    if cfg.model_kind != ckpt.model_kind:
        raise ckpt_io.CheckpointError("model kind in header does not match config")
    mcfg = dict(ckpt.header["model_config"])
    if ckpt.model_kind == "glow":
        model = GlowModel(GlowConfig(**mcfg))
    else:
        model = WaveletFlowModel(WaveletFlowConfig(**mcfg))
    model.load_state_dict({k: v for k, v in ckpt.tensors.items() if not k.startswith("optim.")})
    state = None
    if "epoch" in ckpt.header:
        rngs = {}
        for name, st in ckpt.header["rng"].items():
            gen = np.random.default_rng()
            gen.bit_generator.state = st
            rngs[name] = gen
        opt = Adam(cfg.learning_rate, cfg.weight_decay)
        opt.load_state_tensors({k: v for k, v in ckpt.tensors.items() if k.startswith("optim.")})
        state = TrainState(ckpt.header["epoch"], ckpt.header["step"], rngs, opt,
                           list(ckpt.header.get("history", [])))
    return model, cfg, state


def load_checkpoint(path):
    return from_checkpoint(ckpt_io.load(path))


def write_history(path, history) -> None:
    lines = ["epoch,split,mean_bpd,mean_nll"]
    lines += [f"{r['epoch']},{r['split']},{float(r['mean_bpd'])!r},{float(r['mean_nll'])!r}" for r in history]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
