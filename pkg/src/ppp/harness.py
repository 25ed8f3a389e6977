"""Run configuration, training loop, evaluation and comparison reports."""

from __future__ import annotations

import contextlib
import io
import json
import logging
import os
from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F

from . import __version__
from .data import (BatchComposition, IdentityBatchSampler, image_dataset_loader, split_holdout,
                   synth_identity_dataset)
from .errors import (ConfigurationError, ContractViolation, DivergenceError, FormatVersionError)
from .losses import BatchGateRecord, LossConfig, RunningPrototypes, total_loss
from .model import GatedResNet, ModelSpec
from .prototypes import dispersion, enroll, gate_decisions
from .pruning import build_plan, conv_inventory, full_plan, prune, state_digest, utilization_rate

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "ppp-checkpoint"
CHECKPOINT_VERSION = 1
REPORT_FORMAT = "ppp-eval-report"
REPORT_VERSION = 1
MODES = ("ppp", "noreg", "vanilla")
ARTIFACT_ENV = "PPP_ARTIFACT_ROOT"


def artifact_root():
    return os.environ.get(ARTIFACT_ENV, "artifacts")


def _strict(cls, d, what):
    unknown = set(d) - set(cls.__dataclass_fields__)
    if unknown:
        raise ConfigurationError(f"unknown {what} keys: {sorted(unknown)}")
    return cls(**d)


@dataclass
class DataSpec:
    kind: str = "synthetic"
    K: int = 4
    P: int = 8
    samples_per_identity: int = 200
    noise_level: float = 0.5
    identity_scale: float = 0.5
    jitter: float = 0.0
    layout: str = "partition"
    pattern: str = "grating"
    seed: int = 0
    path: str | None = None
    subset: int | None = None
    holdout_frac: float = 0.25

    def __post_init__(self):
        if self.kind not in ("synthetic", "cifar10", "cifar100"):
            raise ConfigurationError(f"unknown data kind {self.kind!r}")
        if self.kind != "synthetic" and not self.path:
            raise ConfigurationError(f"data kind {self.kind!r} needs a path")
        if not 0.0 < self.holdout_frac < 1.0:
            raise ConfigurationError("holdout_frac must lie in (0, 1)")


@dataclass
class OptimSpec:
    lr_net: float = 0.01
    lr_gate: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 30
    cosine: bool = True
    # alpha ramps linearly from 0 over this many epochs
    alpha_warmup_epochs: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.lr_net <= 0 or self.lr_gate <= 0:
            raise ConfigurationError("epochs and learning rates must be positive")
        if self.alpha_warmup_epochs < 0:
            raise ConfigurationError("alpha_warmup_epochs must be >= 0")


@dataclass
class RunConfig:
    """Everything a training run depends on.

    ``noreg`` is ``ppp`` with alpha forced to 0; ``vanilla`` has no gates.
    """

    mode: str = "ppp"
    seed: int = 0
    model: ModelSpec = field(default_factory=ModelSpec)
    loss: LossConfig = field(default_factory=LossConfig)
    batch: BatchComposition = field(default_factory=BatchComposition)
    optim: OptimSpec = field(default_factory=OptimSpec)
    data: DataSpec = field(default_factory=DataSpec)
    pretrained: str | None = None
    enroll_batch_size: int = 32

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.enroll_batch_size < 1:
            raise ConfigurationError("enroll_batch_size must be >= 1")
        if (self.mode == "vanilla") == self.model.gated:
            raise ConfigurationError(
                f"mode {self.mode!r} requires model.gated={self.mode != 'vanilla'}")

    def effective_loss(self):
        if self.mode == "noreg":
            return LossConfig(**{**self.loss.to_dict(), "alpha": 0.0})
        return self.loss

    def to_dict(self):
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        if "model" in d:
            d["model"] = ModelSpec.from_dict(d["model"])
        if "loss" in d:
            d["loss"] = LossConfig.from_dict(d["loss"])
        if "batch" in d:
            d["batch"] = BatchComposition.from_dict(d["batch"])
        if "optim" in d:
            d["optim"] = _strict(OptimSpec, d["optim"], "optim")
        if "data" in d:
            d["data"] = _strict(DataSpec, d["data"], "data")
        if "mode" in d and "model" not in d:
            d["model"] = ModelSpec(gated=d["mode"] != "vanilla")
        return cls(**d)

    @classmethod
    def from_file(cls, path):
        with open(path) as f:
            try:
                return cls.from_dict(json.load(f))
            except json.JSONDecodeError as e:
                raise ConfigurationError(f"{path}: not valid JSON ({e})") from e

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")


DESK_DATA = dict(noise_level=1.5, identity_scale=0.2, jitter=1.0)


def desk_config(mode="ppp", seed=0):
    """The desk-scale recipe: a vanilla backbone trained from scratch, then
    ``ppp`` or ``noreg`` fine-tuning of a gated copy of it."""
    data = DataSpec(seed=seed, **DESK_DATA)
    if mode == "vanilla":
        return RunConfig(mode="vanilla", seed=seed, model=ModelSpec(gated=False), data=data,
                         optim=OptimSpec(lr_net=0.1, epochs=10))
    return RunConfig(mode=mode, seed=seed, data=data,
                     optim=OptimSpec(epochs=20, alpha_warmup_epochs=5))


def load_splits(spec: DataSpec):
    """(train, test) datasets for a data spec."""
    if spec.kind == "synthetic":
        ds = synth_identity_dataset(spec.K, spec.P, spec.samples_per_identity,
                                    spec.noise_level, spec.seed,
                                    identity_scale=spec.identity_scale, jitter=spec.jitter,
                                    layout=spec.layout, pattern=spec.pattern)
        return split_holdout(ds, spec.holdout_frac)
    train = image_dataset_loader(spec.path, "train", spec.subset, spec.seed)
    test = image_dataset_loader(spec.path, "test")
    return train, test


# ---------------------------------------------------------------------------
# checkpoints


def _write_torch(obj, path):
    # via a buffer: torch names zip records after the file, which would make
    # identical checkpoints differ byte-wise under different names
    buf = io.BytesIO()
    torch.save(obj, buf)
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def save_checkpoint(ckpt, path):
    _write_torch(ckpt, path)


def load_checkpoint(path):
    ckpt = torch.load(path, map_location="cpu", weights_only=True)
    if ckpt.get("format") != CHECKPOINT_FORMAT:
        raise ContractViolation(f"{path}: not a checkpoint file")
    if int(ckpt.get("version", 0)) > CHECKPOINT_VERSION:
        raise FormatVersionError(f"{path}: checkpoint version {ckpt['version']} is too new")
    return ckpt


def model_from_checkpoint(ckpt):
    cfg = RunConfig.from_dict(ckpt["config"])
    model = GatedResNet(cfg.model)
    model.load_state_dict(ckpt["state_dict"])
    return model.eval(), cfg


def _load_backbone(model, state):
    missing, unexpected = model.load_state_dict(state, strict=False)
    bad = [k for k in missing if ".gate" not in k]
    if bad or unexpected:
        raise ConfigurationError(
            f"pretrained weights do not fit the model (missing {bad[:3]}, unexpected {list(unexpected)[:3]})")


# ---------------------------------------------------------------------------
# training


def train(config: RunConfig, train_ds=None, pretrained=None):
    """Optimize task + alpha * prototype + beta * target loss; returns a checkpoint dict.

    ``pretrained`` is a checkpoint dict (or path) whose network weights seed
    the model; gate modules always start fresh.
    """
    if train_ds is None:
        train_ds, _ = load_splits(config.data)
    if int(train_ds.t.max()) >= config.model.num_classes:
        raise ConfigurationError("dataset has more classes than model.num_classes")
    comp = config.batch
    if config.model.gated:
        comp.check_training()
    comp = BatchComposition(comp.identities_per_batch, comp.samples_per_identity, config.seed)

    torch.manual_seed(config.seed)
    model = GatedResNet(config.model)
    pretrained = pretrained if pretrained is not None else config.pretrained
    if isinstance(pretrained, (str, os.PathLike)):
        pretrained = load_checkpoint(pretrained)
    if pretrained is not None:
        _load_backbone(model, pretrained["state_dict"])

    o = config.optim
    groups = [{"params": model.network_parameters(), "lr": o.lr_net, "weight_decay": o.weight_decay}]
    if model.gated:
        groups.append({"params": model.gate_parameters(), "lr": o.lr_gate, "weight_decay": 0.0})
    opt = torch.optim.SGD(groups, momentum=o.momentum)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, o.epochs) if o.cosine else None
    loss_cfg = config.effective_loss()
    running = RunningPrototypes(loss_cfg.prototype_momentum) if loss_cfg.prototype_momentum is not None else None
    sampler = IdentityBatchSampler(train_ds.p.numpy(), comp)

    steps, epochs, step = [], [], 0
    for epoch in range(o.epochs):
        model.train()
        ramp = min(1.0, epoch / o.alpha_warmup_epochs) if o.alpha_warmup_epochs else 1.0
        epoch_loss = LossConfig(**{**loss_cfg.to_dict(), "alpha": loss_cfg.alpha * ramp})
        sums = {"task": 0.0, "prototype": 0.0, "target": 0.0, "total": 0.0, "on_rate": 0.0}
        correct = seen = nb = 0
        for idx in sampler:
            idx = torch.from_numpy(idx)
            xb, tb, pb = train_ds.x[idx], train_ds.t[idx], train_ds.p[idx]
            if model.gated:
                logits, decisions = model(xb, return_decisions=True)
                task = F.cross_entropy(logits, tb)
                record = BatchGateRecord.from_decisions(decisions, pb)
                loss, parts = total_loss(task, record, epoch_loss, running)
                on_rate = sum(float(d.hard.detach().mean()) for d in decisions) / len(decisions)
            else:
                logits = model(xb)
                loss = task = F.cross_entropy(logits, tb)
                parts = {"task": float(task.detach()), "prototype": 0.0, "target": 0.0}
                on_rate = 1.0
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite loss at epoch {epoch} step {step}: {parts}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            entry = {"step": step, **parts, "total": float(loss.detach())}
            steps.append(entry)
            for k in ("task", "prototype", "target", "total"):
                sums[k] += entry[k]
            sums["on_rate"] += on_rate
            correct += int((logits.argmax(1) == tb).sum())
            seen += len(tb)
            nb += 1
            step += 1
        if sched is not None:
            sched.step()
        if nb == 0:
            raise ConfigurationError("sampler produced no batches")
        summary = {"epoch": epoch, **{k: v / nb for k, v in sums.items()},
                   "train_acc": 100.0 * correct / seen}
        epochs.append(summary)
        log.info("epoch %d task %.4f proto %.4f target %.4f on-rate %.3f acc %.1f",
                 epoch, summary["task"], summary["prototype"], summary["target"],
                 summary["on_rate"], summary["train_acc"])

    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": config.to_dict(),
        "seed": config.seed,
        "step": step,
        "state_dict": model.state_dict(),
        "history": {"steps": steps, "epochs": epochs},
    }


# ---------------------------------------------------------------------------
# evaluation


@contextlib.contextmanager
def forbid_forward(module, what="full model"):
    """Raise if ``module`` is run while the context is active."""
    def hook(*_):
        raise ContractViolation(f"{what} was used after it should have been discarded")
    handle = module.register_forward_pre_hook(hook)
    try:
        yield
    finally:
        handle.remove()


@dataclass
class EvalReport:
    method: str
    type: str
    accuracy_pct: float
    util_propagated: float
    util_output_only: float
    mean_dispersion: float | None = None
    layer_dispersion: dict = field(default_factory=dict)
    per_identity: list = field(default_factory=list)
    omitted_identities: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.accuracy_pct <= 100.0:
            raise ContractViolation(f"accuracy {self.accuracy_pct} outside [0, 100]")
        for u in (self.util_propagated, self.util_output_only):
            if not 0.0 <= u <= 1.0:
                raise ContractViolation(f"utilization {u} outside [0, 1]")
        self.layer_dispersion = {int(k): v for k, v in self.layer_dispersion.items()}

    def record(self):
        return {"method": self.method, "type": self.type, "accuracy_pct": self.accuracy_pct,
                "util_propagated": self.util_propagated, "util_output_only": self.util_output_only,
                "mean_dispersion": self.mean_dispersion}

    def to_dict(self):
        d = asdict(self)
        d["layer_dispersion"] = {str(k): v for k, v in sorted(self.layer_dispersion.items())}
        return {"format": REPORT_FORMAT, "version": REPORT_VERSION, "record": self.record(), "detail": d}

    @classmethod
    def from_dict(cls, d):
        if d.get("format") != REPORT_FORMAT:
            raise ContractViolation("not an evaluation report")
        if int(d.get("version", 0)) > REPORT_VERSION:
            raise FormatVersionError(f"report version {d['version']} is too new")
        return cls(**d["detail"])

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path):
        with open(path, "w") as f:
            f.write(self.to_json())

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_dict(json.load(f))


def _accuracy(logits, t):
    return int((logits.argmax(1) == t).sum())


def sample_utilization(model, hard, convention="propagated"):
    """Per-sample utilization when every input picks its own gate pattern.

    ``hard`` maps layer id to an (N, m) 0/1 tensor. No degenerate-layer fix
    is applied: nothing is physically pruned in this mode.
    """
    entries = conv_inventory(model)
    total = sum(e.params for e in entries)
    fixed = sum(e.params for e in entries if ".conv" not in e.name)
    n = next(iter(hard.values())).shape[0]
    alive = torch.full((n,), float(fixed), dtype=torch.float64)
    for blk in model.blocks:
        n1 = hard[blk.ids[0]].double().sum(1)
        n2 = hard[blk.ids[1]].double().sum(1)
        if convention == "propagated":
            alive += 9 * (n1 * blk.in_ch + n2 * n1)
        else:
            alive += 9 * (n1 * blk.in_ch + n2 * blk.out_ch)
    return alive / total


def evaluate(ckpt, test_ds, mode, enroll_batch_size=None, force_full_prototype=False):
    """Accuracy and utilization of one checkpoint in one inference mode.

    ``single``: every test input picks its own gates in the full model.
    ``prototype``: per identity, enroll on the first held-out samples, prune,
    discard the full model and evaluate the personal model.
    ``vanilla``: plain full-width inference.
    """
    if mode not in ("single", "prototype", "vanilla"):
        raise ConfigurationError(f"unknown evaluation mode {mode!r}")
    model, cfg = model_from_checkpoint(ckpt)
    if mode != "vanilla" and not model.gated:
        raise ContractViolation(f"mode {mode!r} needs a gated checkpoint")
    eb = enroll_batch_size or cfg.enroll_batch_size
    tau = cfg.loss.tau
    n_ids = cfg.data.P if cfg.data.kind == "synthetic" else cfg.model.num_classes
    present = test_ds.identities()
    omitted = sorted(set(range(n_ids)) - set(present))
    meta = {"checkpoint_digest": state_digest(model), "seed": cfg.seed, "n_test": len(test_ds),
            "enroll_batch_size": eb, "tau": tau, "target_rate": cfg.loss.target_rate,
            "package_version": __version__, "torch_version": torch.__version__}

    if mode == "vanilla":
        with torch.no_grad():
            masks = full_plan(model).masks() if model.gated else None
            logits = torch.cat([model(test_ds.x[i:i + 512], masks=masks)
                                for i in range(0, len(test_ds), 512)])
        acc = 100.0 * _accuracy(logits, test_ds.t) / len(test_ds)
        return EvalReport(cfg.mode, "N/A", acc, 1.0, 1.0, None, {}, [], omitted, meta)

    per_identity, layer_disp = [], {}
    correct_total = 0
    util_p, util_o = [], []
    for p in present:
        idx = test_ds.indices_of(p)
        x, t = test_ds.x[idx], test_ds.t[idx]
        proto = enroll(model, x[:eb], p, tau)
        hard = gate_decisions(model, x)
        disp = {lid: dispersion(hard[lid], proto, lid) for lid in proto.layer_ids}
        for lid, v in disp.items():
            layer_disp.setdefault(lid, []).append(v)
        row = {"identity": p, "n": len(idx), "enrolled": min(eb, len(idx)),
               "dispersion": sum(disp.values()) / len(disp)}
        if mode == "single":
            with torch.no_grad():
                c = _accuracy(model(x), t)
            up = sample_utilization(model, hard, "propagated").mean().item()
            uo = sample_utilization(model, hard, "output_only").mean().item()
        else:
            plan = full_plan(model) if force_full_prototype else build_plan(model, proto)
            pruned = prune(model, plan, provenance={"identity": p, "tau": tau,
                                                    "target_rate": cfg.loss.target_rate})
            with forbid_forward(model), torch.no_grad():
                c = _accuracy(pruned(x), t)
            up = utilization_rate(plan, model, "propagated")
            uo = utilization_rate(plan, model, "output_only")
            row["certificate_deviation"] = pruned.certificate["max_abs_deviation"]
            row["degenerate_layers"] = list(plan.degenerate)
        correct_total += c
        util_p.append(up)
        util_o.append(uo)
        row.update(accuracy_pct=100.0 * c / len(idx), util_propagated=up, util_output_only=uo)
        per_identity.append(row)

    layer_mean = {lid: sum(v) / len(v) for lid, v in sorted(layer_disp.items())}
    return EvalReport(
        method=cfg.mode, type=mode,
        accuracy_pct=100.0 * correct_total / len(test_ds),
        util_propagated=sum(util_p) / len(util_p),
        util_output_only=sum(util_o) / len(util_o),
        mean_dispersion=sum(layer_mean.values()) / len(layer_mean),
        layer_dispersion=layer_mean, per_identity=per_identity,
        omitted_identities=omitted, metadata=meta)


# ---------------------------------------------------------------------------
# reports

# Full-scale rows, printed for reference only; not reproducible at desk scale.
REFERENCE_ROWS = [
    ("ResNet-56 / CIFAR-10", "Vanilla", "N/A", 92.9, 100.0),
    ("ResNet-56 / CIFAR-10", "AIG", "Single", 92.1, 60.3),
    ("ResNet-56 / CIFAR-10", "PPP", "Single", 92.7, 40.2),
    ("ResNet-56 / CIFAR-10", "PPP", "Prototype", 94.4, 37.6),
    ("ResNet-56 / CIFAR-100", "Vanilla", "N/A", 67.9, 100.0),
    ("ResNet-56 / CIFAR-100", "AIG", "Single", 67.8, 74.0),
    ("ResNet-56 / CIFAR-100", "PPP", "Single", 66.7, 52.0),
    ("ResNet-56 / CIFAR-100", "PPP", "Prototype", 68.7, 52.4),
    ("ResNet-26 / KWS", "Vanilla", "N/A", 99.7, 100.0),
    ("ResNet-26 / KWS", "PPP NoReg", "Single", 98.9, 49.3),
    ("ResNet-26 / KWS", "PPP NoReg", "Prototype", 53.7, 32.2),
    ("ResNet-26 / KWS", "PPP", "Single", 99.4, 37.8),
    ("ResNet-26 / KWS", "PPP", "Prototype", 99.4, 35.4),
]

_METHOD_NAMES = {"ppp": "PPP", "noreg": "PPP NoReg", "vanilla": "Vanilla"}


def format_report(reports):
    """Desk-scale rows followed by the full-scale reference rows."""
    lines = ["Desk-scale results",
             f"{'Method':<12} {'Type':<10} {'Acc (%)':>8} {'Util prop (%)':>14} "
             f"{'Util out (%)':>13} {'Dispersion':>11}"]
    for r in reports:
        disp = "-" if r.mean_dispersion is None else f"{r.mean_dispersion:.4f}"
        lines.append(f"{_METHOD_NAMES.get(r.method, r.method):<12} {r.type.capitalize() if r.type != 'N/A' else 'N/A':<10} "
                     f"{r.accuracy_pct:>8.1f} {100 * r.util_propagated:>14.1f} "
                     f"{100 * r.util_output_only:>13.1f} {disp:>11}")
    lines += ["", "Reference rows (published full-scale numbers; NOT reproduced at desk scale)",
              f"{'Setting':<22} {'Method':<10} {'Type':<10} {'Acc (%)':>8} {'Util (%)':>9}"]
    for setting, method, typ, acc, util in REFERENCE_ROWS:
        lines.append(f"{setting:<22} {method:<10} {typ:<10} {acc:>8.1f} {util:>9.1f}  [reference]")
    return "\n".join(lines) + "\n"


def report_records(reports):
    return {"format": "ppp-report", "version": 1,
            "records": [r.record() for r in reports],
            "reference_rows": [dict(zip(("setting", "method", "type", "accuracy_pct", "util_pct"), row))
                               for row in REFERENCE_ROWS]}
