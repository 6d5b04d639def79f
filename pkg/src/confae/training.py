"""Optimization loop: AdamW, plateau scheduling, minibatching, metrics.

Runs are deterministic: all randomness (parameter init, the train/validation
split, epoch shuffles, probe draws) derives from the config seed through one
seed sequence, and every reduction has a fixed order.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import data as data_mod
from . import net
from . import regularizers as reg

REGULARIZERS = ("none", "globiso", "lociso", "conf", "constconf")

PLATEAU_IMPROVEMENT = 1e-8


class ConfigError(ValueError):
    """Invalid run configuration; ``problems`` lists every offending key."""

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("invalid configuration: " + "; ".join(self.problems))


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, batch: int, term: str, value: float):
        self.epoch = epoch
        self.batch = batch
        self.term = term
        super().__init__(
            f"non-finite {term} loss ({value!r}) at epoch {epoch}, batch {batch}"
        )


@dataclass
class SchedulerConfig:
    enabled: bool = False
    factor: float = 0.5
    patience: int = 10
    min_lr: float = 1e-6


@dataclass
class RunConfig:
    regularizer: str = "none"
    lambda_geo: float | None = None
    epochs: int = 200
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    probes: int = 8
    exact_trace: bool = False
    seed: int = 42
    detach_codes: bool = False
    dims: list[int] = field(default_factory=lambda: [3, 50, 50, 50, 2])
    activation: str = "relu"
    val_fraction: float = 0.2
    checkpoint_every: int = 0
    scheduler: SchedulerConfig = field(default_factory=SchedulerConfig)

    @property
    def latent_dim(self) -> int:
        return self.dims[-1]

    def problems(self) -> list[str]:
        out = []
        if self.regularizer not in REGULARIZERS:
            out.append(f"regularizer: unknown tag {self.regularizer!r}")
        if self.lambda_geo is not None and self.lambda_geo < 0:
            out.append("lambda_geo: must be nonnegative")
        if self.epochs < 1:
            out.append("epochs: must be at least 1")
        if self.batch_size < 1:
            out.append("batch_size: must be at least 1")
        if self.regularizer == "globiso" and self.batch_size < 2:
            out.append("batch_size: pairwise regularizer needs batches of at least 2")
        if not self.lr > 0:
            out.append("lr: must be positive")
        if self.weight_decay < 0:
            out.append("weight_decay: must be nonnegative")
        for name in ("beta1", "beta2"):
            b = getattr(self, name)
            if not 0.0 <= b < 1.0:
                out.append(f"{name}: must lie in [0, 1)")
        if not self.eps > 0:
            out.append("eps: must be positive")
        if self.probes < 1:
            out.append("probes: must be at least 1")
        if len(self.dims) < 2 or any(d < 1 for d in self.dims):
            out.append("dims: need at least two positive sizes")
        if self.activation not in net.ACTIVATIONS:
            out.append(f"activation: unknown tag {self.activation!r}")
        if not 0.0 < self.val_fraction < 1.0:
            out.append("val_fraction: must lie strictly between 0 and 1")
        if self.checkpoint_every < 0:
            out.append("checkpoint_every: must be nonnegative")
        if self.exact_trace and len(self.dims) >= 2 and self.dims[-1] > 3:
            out.append("exact_trace: exact moments are only offered for latent dims <= 3")
        if not 0.0 < self.scheduler.factor < 1.0:
            out.append("scheduler.factor: must lie strictly between 0 and 1")
        if self.scheduler.patience < 1:
            out.append("scheduler.patience: must be at least 1")
        if self.scheduler.min_lr < 0:
            out.append("scheduler.min_lr: must be nonnegative")
        return out

    def validate(self) -> None:
        problems = self.problems()
        if problems:
            raise ConfigError(problems)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "RunConfig":
        problems = []
        known = {f for f in cls.__dataclass_fields__}
        unknown = sorted(set(obj) - known)
        problems.extend(f"{k}: unknown key" for k in unknown)
        kwargs = {}
        for key, value in obj.items():
            if key in unknown:
                continue
            if key == "scheduler":
                if not isinstance(value, dict):
                    problems.append("scheduler: expected an object")
                    continue
                sched_known = set(SchedulerConfig.__dataclass_fields__)
                bad = sorted(set(value) - sched_known)
                problems.extend(f"scheduler.{k}: unknown key" for k in bad)
                kwargs["scheduler"] = SchedulerConfig(
                    **{k: v for k, v in value.items() if k in sched_known}
                )
            else:
                kwargs[key] = value
        if problems:
            raise ConfigError(problems)
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg


@dataclass
class EpochRecord:
    epoch: int
    recon: float
    geo: float
    val_recon: float
    lr: float
    seconds: float
    total: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class RunMetrics:
    records: list[EpochRecord] = field(default_factory=list)

    def to_jsonl(self) -> str:
        return "".join(r.to_json() + "\n" for r in self.records)


@dataclass
class AdamWState:
    step: int
    m_weights: list[np.ndarray]
    v_weights: list[np.ndarray]
    m_biases: list[np.ndarray]
    v_biases: list[np.ndarray]

    @classmethod
    def zeros(cls, network: net.Mlp) -> "AdamWState":
        return cls(
            step=0,
            m_weights=[np.zeros_like(l.weight) for l in network.layers],
            v_weights=[np.zeros_like(l.weight) for l in network.layers],
            m_biases=[np.zeros_like(l.bias) for l in network.layers],
            v_biases=[np.zeros_like(l.bias) for l in network.layers],
        )

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "m_weights": [a.tolist() for a in self.m_weights],
            "v_weights": [a.tolist() for a in self.v_weights],
            "m_biases": [a.tolist() for a in self.m_biases],
            "v_biases": [a.tolist() for a in self.v_biases],
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "AdamWState":
        return cls(
            step=int(obj["step"]),
            m_weights=[np.array(a, dtype=np.float64) for a in obj["m_weights"]],
            v_weights=[np.array(a, dtype=np.float64) for a in obj["v_weights"]],
            m_biases=[np.array(a, dtype=np.float64) for a in obj["m_biases"]],
            v_biases=[np.array(a, dtype=np.float64) for a in obj["v_biases"]],
        )


def adamw_step(
    network: net.Mlp,
    grads: net.ParamGradient,
    state: AdamWState,
    *,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> None:
    """One decoupled-weight-decay Adam step, updating parameters in place."""
    state.step += 1
    bc1 = 1.0 - beta1**state.step
    bc2 = 1.0 - beta2**state.step

    def update(theta, g, m, v):
        if g.shape != theta.shape:
            raise ValueError("gradient shape does not match parameters")
        theta -= lr * weight_decay * theta  # decay decoupled from the moments
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        theta -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)

    for layer, gw, gb, mw, vw, mb, vb in zip(
        network.layers,
        grads.weights,
        grads.biases,
        state.m_weights,
        state.v_weights,
        state.m_biases,
        state.v_biases,
    ):
        update(layer.weight, gw, mw, vw)
        update(layer.bias, gb, mb, vb)


@dataclass
class PlateauState:
    lr: float
    factor: float = 0.5
    patience: int = 10
    min_lr: float = 1e-6
    best: float = np.inf
    bad_epochs: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "PlateauState":
        return cls(**obj)


def reduce_on_plateau(state: PlateauState, val_loss: float) -> float:
    """Halt-and-decay schedule: cut lr after `patience` stale epochs."""
    if val_loss < state.best - PLATEAU_IMPROVEMENT:
        state.best = val_loss
        state.bad_epochs = 0
    else:
        state.bad_epochs += 1
        if state.bad_epochs >= state.patience:
            state.lr = max(state.lr * state.factor, state.min_lr)
            state.bad_epochs = 0
    return state.lr


@dataclass
class TrainState:
    """Everything needed to continue a run exactly where it stopped."""

    epoch: int
    enc: net.Mlp
    dec: net.Mlp
    enc_opt: AdamWState
    dec_opt: AdamWState
    rng_state: dict
    plateau: PlateauState


@dataclass
class TrainResult:
    enc: net.Mlp
    dec: net.Mlp
    metrics: RunMetrics
    state: TrainState


def _derived_seeds(seed: int) -> dict[str, int]:
    children = np.random.SeedSequence(seed).spawn(4)
    names = ("encoder_init", "decoder_init", "split", "loop")
    return {n: int(c.generate_state(1, dtype=np.uint64)[0]) for n, c in zip(names, children)}


def _architectures(config: RunConfig) -> tuple[list[int], list[str]]:
    acts = [config.activation] * (len(config.dims) - 2) + ["identity"]
    return config.dims, acts


def init_networks(config: RunConfig) -> tuple[net.Mlp, net.Mlp]:
    """Seed-derived encoder/decoder pair (decoder dimensions reversed)."""
    seeds = _derived_seeds(config.seed)
    dims, acts = _architectures(config)
    enc = net.init(dims, acts, seeds["encoder_init"])
    dec = net.init(list(reversed(dims)), acts, seeds["decoder_init"])
    return enc, dec


def split_dataset(config: RunConfig, ds: data_mod.Dataset):
    return data_mod.split(ds, config.val_fraction, _derived_seeds(config.seed)["split"])


def _geo_value_and_grads(config, dec, codes, rng, want_grad):
    tag = config.regularizer
    if tag == "globiso":
        if want_grad:
            return reg.global_iso_loss_and_grad(dec, codes)
        return reg.global_iso_loss(dec, codes), None, None
    kwargs = dict(exact=True) if config.exact_trace else dict(rng=rng)
    probes = config.latent_dim if config.exact_trace else config.probes
    fns = {
        "conf": (reg.nonlinear_conformal_loss_and_grad, reg.nonlinear_conformal_loss),
        "lociso": (reg.local_iso_loss_and_grad, reg.local_iso_loss),
        "constconf": (reg.constant_conformal_loss_and_grad, reg.constant_conformal_loss),
    }
    and_grad, value_only = fns[tag]
    if want_grad:
        return and_grad(dec, codes, probes, **kwargs)
    return value_only(dec, codes, probes, **kwargs), None, None


def _require_intensity(config: RunConfig) -> float:
    if config.regularizer == "none":
        return 0.0
    if config.lambda_geo is None:
        raise ConfigError(
            ["lambda_geo: required when a regularizer is enabled (run intensity calibration)"]
        )
    return config.lambda_geo


def train(
    config: RunConfig,
    ds: data_mod.Dataset,
    *,
    resume: TrainState | None = None,
    on_epoch=None,
) -> TrainResult:
    """Minimize reconstruction + intensity * geometric term over minibatches.

    The geometric term is evaluated on the codes of the current batch; its
    gradient reaches both networks unless ``detach_codes`` cuts the encoder
    path. With intensity zero the enabled regularizer is still evaluated and
    logged (monitored mode). ``resume`` continues a run toward the same total
    epoch count, bit-exactly.
    """
    config.validate()
    lam = _require_intensity(config)
    if not data_mod.is_standardized(ds):
        raise ValueError("dataset must be standardized before training")

    train_ds, val_ds = split_dataset(config, ds)
    if resume is None:
        enc, dec = init_networks(config)
        enc_opt, dec_opt = AdamWState.zeros(enc), AdamWState.zeros(dec)
        rng = np.random.default_rng(_derived_seeds(config.seed)["loop"])
        plateau = PlateauState(
            lr=config.lr,
            factor=config.scheduler.factor,
            patience=config.scheduler.patience,
            min_lr=config.scheduler.min_lr,
        )
        start_epoch = 0
    else:
        enc, dec = resume.enc, resume.dec
        enc_opt, dec_opt = resume.enc_opt, resume.dec_opt
        rng = np.random.default_rng()
        rng.bit_generator.state = resume.rng_state
        plateau = resume.plateau
        start_epoch = resume.epoch

    x_train = train_ds.samples
    x_val = val_ds.samples
    n_train = x_train.shape[0]
    monitored = config.regularizer != "none"
    metrics = RunMetrics()
    lr = plateau.lr

    for epoch in range(start_epoch + 1, config.epochs + 1):
        tic = time.perf_counter()
        perm = rng.permutation(n_train)
        recon_sum = 0.0
        geo_sum = 0.0
        n_batches = 0
        for batch_no, lo in enumerate(range(0, n_train, config.batch_size)):
            idx = perm[lo : lo + config.batch_size]
            x = x_train[idx]
            codes, enc_tape = net.forward_tape(enc, x)
            y, dec_tape = net.forward_tape(dec, codes)
            diff = y - x
            rec = float((diff**2).sum() / x.shape[0])
            if not np.isfinite(rec):
                raise TrainingDivergedError(epoch, batch_no, "recon", rec)
            dec_grads, g_codes, _ = net.backward(
                dec, dec_tape, out_grad=2.0 * diff / x.shape[0]
            )
            geo_val = 0.0
            # a trailing singleton batch has no pairs to compare
            batch_has_geo = monitored and (
                config.regularizer != "globiso" or x.shape[0] >= 2
            )
            if batch_has_geo:
                geo_val, dec_geo, codes_geo = _geo_value_and_grads(
                    config, dec, codes, rng, want_grad=lam > 0.0
                )
                if not np.isfinite(geo_val):
                    raise TrainingDivergedError(epoch, batch_no, config.regularizer, geo_val)
                if lam > 0.0:
                    dec_grads.add_scaled(dec_geo, lam)
                    if not config.detach_codes:
                        g_codes = g_codes + lam * codes_geo
            enc_grads, _, _ = net.backward(enc, enc_tape, out_grad=g_codes)
            opts = dict(
                lr=lr,
                beta1=config.beta1,
                beta2=config.beta2,
                eps=config.eps,
                weight_decay=config.weight_decay,
            )
            adamw_step(enc, enc_grads, enc_opt, **opts)
            adamw_step(dec, dec_grads, dec_opt, **opts)
            recon_sum += rec * x.shape[0]
            geo_sum += geo_val
            n_batches += 1

        val_recon = reg.recon_loss(enc, dec, x_val)
        epoch_recon = recon_sum / n_train
        epoch_geo = geo_sum / n_batches
        record = EpochRecord(
            epoch=epoch,
            recon=epoch_recon,
            geo=epoch_geo,
            val_recon=val_recon,
            lr=lr,
            seconds=time.perf_counter() - tic,
            total=epoch_recon + lam * epoch_geo,
        )
        metrics.records.append(record)
        if config.scheduler.enabled:
            plateau.lr = lr
            lr = reduce_on_plateau(plateau, val_recon)
        if on_epoch is not None:
            state = TrainState(
                epoch=epoch,
                enc=enc,
                dec=dec,
                enc_opt=enc_opt,
                dec_opt=dec_opt,
                rng_state=rng.bit_generator.state,
                plateau=replace(plateau, lr=lr),
            )
            on_epoch(state, record)

    final = TrainState(
        epoch=config.epochs,
        enc=enc,
        dec=dec,
        enc_opt=enc_opt,
        dec_opt=dec_opt,
        rng_state=rng.bit_generator.state,
        plateau=replace(plateau, lr=lr),
    )
    return TrainResult(enc=enc, dec=dec, metrics=metrics, state=final)


CALIBRATION_SAMPLE = 512

# Fraction of the initial reconstruction magnitude allotted to the geometric
# term. Reconstruction falls by roughly two orders of magnitude over a full
# schedule while the geometric losses keep their initial scale, so matching
# the raw initial values lets the regularizer dominate the late phase and
# collapse the decoder's conditioning to 1; the backoff matches the two terms
# in the trained regime instead.
CALIBRATION_BALANCE = 0.004


def calibrate_intensity(config: RunConfig, ds: data_mod.Dataset):
    """Propose an intensity balancing the two loss terms over a whole run.

    Evaluates reconstruction and the enabled geometric term on the untrained
    networks over a fixed training subsample and returns
    ``(proposed_intensity, recon_value, geo_value)`` with
    ``proposed_intensity = CALIBRATION_BALANCE * recon_value / geo_value``.
    """
    config.validate()
    if config.regularizer == "none":
        raise ConfigError(["regularizer: nothing to calibrate for tag 'none'"])
    if not data_mod.is_standardized(ds):
        raise ValueError("dataset must be standardized before calibration")
    train_ds, _ = split_dataset(config, ds)
    sample = train_ds.samples[: min(CALIBRATION_SAMPLE, len(train_ds))]
    enc, dec = init_networks(config)
    recon0 = reg.recon_loss(enc, dec, sample)
    codes = net.forward(enc, sample)
    rng = np.random.default_rng(_derived_seeds(config.seed)["loop"])
    use_exact = config.latent_dim <= 3
    probe_cfg = replace(config, exact_trace=use_exact)
    geo0, _, _ = _geo_value_and_grads(probe_cfg, dec, codes, rng, want_grad=False)
    if geo0 <= 1e-12:
        raise ConfigError(
            ["lambda_geo: geometric term vanishes on the initial model; calibration is moot"]
        )
    return CALIBRATION_BALANCE * recon0 / geo0, recon0, geo0
