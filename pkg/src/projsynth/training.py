"""Dataset handling, ADAM optimization, and the training loop.

Training is fully deterministic given the config seed: one stream drives
the per-epoch shuffle and a second drives dropout masks, both derived
from the seed via SeedSequence. Checkpoints bundle model weights, ADAM
moment buffers, both rng states, and the loss history, so a resumed run
continues bit-identically to an uninterrupted one.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .containers import load_projection, load_weights, save_weights
from .errors import ConfigurationError, LoadError, NumericalError, ParameterError
from .generators import build_model, config_from_dict
from .metrics import scale_to_unit_range
from .objectives import EvaluationNetwork, LossConfig, make_loss_fn

CHECKPOINT_FORMAT_VERSION = 1


@dataclass
class DatasetPair:
    mr: "ProjectionImage"
    xray: "ProjectionImage"
    view_id: str

    def __post_init__(self):
        if self.mr.dims != self.xray.dims:
            raise ParameterError(
                f"pair {self.view_id}: MR dims {self.mr.dims} != X-ray dims {self.xray.dims}"
            )


def load_dataset(manifest_path, subset=None):
    """Read projection pairs listed in a dataset manifest.

    Both images are [-1, 1]-scaled at load. ``subset`` selects the manifest's
    recorded 'train' or 'test' split when present.
    """
    manifest_path = Path(manifest_path)
    with open(manifest_path) as f:
        manifest = json.load(f)
    wanted = None
    if subset is not None:
        split = manifest.get("split")
        if not split or subset not in split:
            raise LoadError(f"manifest records no {subset!r} split")
        wanted = set(split[subset])
    pairs = []
    for entry in manifest["pairs"]:
        if wanted is not None and entry["id"] not in wanted:
            continue
        mr = scale_to_unit_range(load_projection(manifest_path.parent / entry["mr"]))
        xray = scale_to_unit_range(load_projection(manifest_path.parent / entry["xray"]))
        pairs.append(DatasetPair(mr=mr, xray=xray, view_id=entry["id"]))
    if not pairs:
        raise LoadError(f"no pairs selected from {manifest_path}")
    return pairs


def split_dataset(pairs, n_train, n_test, seed=0):
    """Seeded shuffle into disjoint train/test subsets."""
    if n_train + n_test > len(pairs):
        raise ParameterError(
            f"cannot split {len(pairs)} pairs into {n_train} train + {n_test} test"
        )
    order = np.random.default_rng(seed).permutation(len(pairs))
    train = [pairs[i] for i in order[:n_train]]
    test = [pairs[i] for i in order[n_train : n_train + n_test]]
    return train, test


# ---------------------------------------------------------------------------
# ADAM
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    learning_rate: float = 0.004
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state):
    """One ADAM update, in place on the parameter tensors.

    m <- b1*m + (1-b1)*g ; v <- b2*v + (1-b2)*g^2 ; bias-corrected
    m_hat, v_hat ; theta <- theta - lr * m_hat / (sqrt(v_hat) + eps).
    """
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if not np.isfinite(g).all():
            raise NumericalError(f"NaN/Inf gradient for parameter {name!r} at step {state.t}")
        if g.shape != p.data.shape:
            raise ParameterError(f"gradient shape {g.shape} != parameter shape {p.data.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        p.data = p.data - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)
    return params, state


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 1
    learning_rate: float = 0.004
    seed: int = 0
    checkpoint_every: int = 0  # epochs between checkpoints; 0 = final only

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigurationError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ConfigurationError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.checkpoint_every < 0:
            raise ConfigurationError("checkpoint_every must be >= 0")


def _batch_tensors(batch):
    mr = np.stack([p.mr.data[None, :, :] for p in batch])
    xray = np.stack([p.xray.data[None, :, :] for p in batch])
    return ad.tensor(mr), ad.tensor(xray)


def train(model, train_set, cfg, loss_cfg=None, eval_net=None, out_dir=None, resume_from=None):
    """Train a generator; returns (model, per-epoch mean-loss history).

    Checkpoints are written to ``out_dir`` at the configured cadence (plus
    a final one). ``resume_from`` continues from a checkpoint prefix as if
    training had never stopped. A non-finite loss aborts with
    NumericalError; checkpoints already on disk are retained.
    """
    if not train_set:
        raise ParameterError("train() needs a non-empty training set")
    loss_cfg = loss_cfg or LossConfig()
    if loss_cfg.kind == "perceptual" and eval_net is None:
        raise ParameterError("perceptual loss requires an evaluation network")
    loss_fn = make_loss_fn(loss_cfg, eval_net)

    shuffle_seed, dropout_seed = np.random.SeedSequence(cfg.seed).spawn(2)
    rng_shuffle = np.random.default_rng(shuffle_seed)
    rng_dropout = np.random.default_rng(dropout_seed)
    adam = AdamState(learning_rate=cfg.learning_rate)
    history = []
    start_epoch = 0

    if resume_from is not None:
        start_epoch, history = _load_checkpoint(resume_from, model, adam, rng_shuffle, rng_dropout)

    n = len(train_set)
    for epoch in range(start_epoch, cfg.epochs):
        order = rng_shuffle.permutation(n)
        epoch_losses = []
        for lo in range(0, n, cfg.batch_size):
            batch = [train_set[i] for i in order[lo : lo + cfg.batch_size]]
            mr_t, xray_t = _batch_tensors(batch)
            pred = model.forward(mr_t, training=True, rng=rng_dropout)
            loss = loss_fn(xray_t, pred)
            value = float(loss.data)
            if not np.isfinite(value):
                raise NumericalError(
                    f"training diverged at epoch {epoch}: loss = {value}; "
                    "last checkpoint retained"
                )
            model.zero_grad()
            ad.backward(loss, leaves=model.params.values())
            adam_step(model.params, {k: p.grad for k, p in model.params.items()}, adam)
            epoch_losses.append(value)
        history.append(float(np.mean(epoch_losses)))
        done = epoch + 1
        if out_dir and cfg.checkpoint_every and done % cfg.checkpoint_every == 0 and done < cfg.epochs:
            save_checkpoint(
                Path(out_dir) / f"ckpt_ep{done:04d}", model, adam, rng_shuffle, rng_dropout,
                done, history, loss_cfg,
            )
    if out_dir:
        save_checkpoint(
            Path(out_dir) / "ckpt_final", model, adam, rng_shuffle, rng_dropout,
            len(history), history, loss_cfg,
        )
    return model, history


def write_history_csv(history, path):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "mean_loss"])
        for i, value in enumerate(history):
            writer.writerow([i, f"{value:.9g}"])


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(prefix, model, adam, rng_shuffle, rng_dropout, epoch, history, loss_cfg):
    """Write <prefix>.weights.json/.bin, <prefix>.adam.json/.bin and
    <prefix>.state.json."""
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    model.save(prefix.with_name(prefix.name + ".weights"))
    moments = {}
    for name in model.params:
        if name in adam.m:
            moments["m." + name] = adam.m[name]
            moments["v." + name] = adam.v[name]
    save_weights(prefix.with_name(prefix.name + ".adam"), moments)
    state = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "arch": model.arch,
        "model_config": json.loads(model.config_json())["config"],
        "model_seed": model.rng_seed,
        "epoch": epoch,
        "history": history,
        "loss": {
            "kind": loss_cfg.kind,
            "l1_reduction": loss_cfg.l1_reduction,
            "layers": list(loss_cfg.layers),
            "layer_weights": list(loss_cfg.layer_weights),
        },
        "adam": {
            "learning_rate": adam.learning_rate,
            "beta1": adam.beta1,
            "beta2": adam.beta2,
            "eps": adam.eps,
            "t": adam.t,
        },
        "rng_shuffle_state": _rng_state_to_json(rng_shuffle),
        "rng_dropout_state": _rng_state_to_json(rng_dropout),
    }
    with open(prefix.with_name(prefix.name + ".state.json"), "w") as f:
        json.dump(state, f, indent=1)
    return prefix


def _rng_state_to_json(rng):
    state = rng.bit_generator.state
    return json.loads(json.dumps(state, default=int))


def _load_checkpoint(prefix, model, adam, rng_shuffle, rng_dropout):
    prefix = Path(prefix)
    state_path = prefix.with_name(prefix.name + ".state.json")
    if not state_path.exists():
        raise LoadError(f"checkpoint state not found: {state_path}")
    with open(state_path) as f:
        state = json.load(f)
    if state.get("arch") != model.arch:
        raise LoadError(
            f"checkpoint holds a {state.get('arch')!r} model, expected {model.arch!r}"
        )
    model.load(prefix.with_name(prefix.name + ".weights.json"))
    moments = load_weights(prefix.with_name(prefix.name + ".adam.json"))
    adam.m = {k[2:]: v for k, v in moments.items() if k.startswith("m.")}
    adam.v = {k[2:]: v for k, v in moments.items() if k.startswith("v.")}
    adam.t = int(state["adam"]["t"])
    adam.learning_rate = float(state["adam"]["learning_rate"])
    adam.beta1 = float(state["adam"]["beta1"])
    adam.beta2 = float(state["adam"]["beta2"])
    adam.eps = float(state["adam"]["eps"])
    rng_shuffle.bit_generator.state = state["rng_shuffle_state"]
    rng_dropout.bit_generator.state = state["rng_dropout_state"]
    return int(state["epoch"]), list(state["history"])


def load_checkpoint_model(prefix):
    """Rebuild the generator stored at a checkpoint prefix."""
    prefix = Path(prefix)
    state_path = prefix.with_name(prefix.name + ".state.json")
    if not state_path.exists():
        raise LoadError(f"checkpoint state not found: {state_path}")
    with open(state_path) as f:
        state = json.load(f)
    cfg = config_from_dict(state["arch"], state["model_config"])
    model = build_model(state["arch"], cfg, rng_seed=state.get("model_seed", 0))
    model.load(prefix.with_name(prefix.name + ".weights.json"))
    return model, state
