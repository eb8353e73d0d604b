"""Training loop, sliding-window prediction, and the experiment scenarios."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import losses  # noqa: F401  (registers the seg_loss op)
from .autodiff import OpAttrs, ShapeError, Tape, Tensor, backward, op_forward
from .losses import RMSprop, one_hot
from .metrics import evaluate_mask
from .nets import Network, adapt_input_channels, build_network, net_forward
from .patching import Accumulator, PatchBatch, Volume, crop, normalize_volume, pad_to, patch_grid, positions_for
from .seeds import derive_seed, rng_for

SCENARIOS = ("intra", "inter", "transfer", "joint")


@dataclass
class TrainConfig:
    batch_size: int = 8
    max_epochs: int = 20
    patches_per_epoch: int = 128
    lr: float = 2e-3
    rho: float = 0.9
    eps: float = 1e-8
    gamma: float = 2.0
    lambda_focal: float = 1.0
    lambda_tpr: float = 1.0
    lambda_jac: float = 1.0
    patience: int = 10
    seed: int = 0
    train_stride: int = 16  # grid the training patches are drawn from
    val_stride: int = 32
    test_stride: int = 16

    def __post_init__(self):
        for name in ("batch_size", "max_epochs", "patches_per_epoch", "patience",
                     "train_stride", "val_stride", "test_stride"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("lr", "eps"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        if not 0 < self.rho < 1:
            raise ValueError("rho must lie in (0, 1)")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        lams = (self.lambda_focal, self.lambda_tpr, self.lambda_jac)
        if min(lams) < 0 or max(lams) <= 0:
            raise ValueError("loss weights must be >= 0 with at least one > 0")


@dataclass
class Case:
    """One normalized volume with its labels, padded once for patch cropping."""

    case_id: str
    volume: Volume
    labels: np.ndarray | None
    part: str = ""

    def __post_init__(self):
        self._padded = {}

    def padded(self, stride):
        if stride not in self._padded:
            starts, shape = patch_grid(self.volume.shape, stride)
            lab = None if self.labels is None else pad_to(self.labels, shape)
            self._padded[stride] = (starts, shape, pad_to(self.volume.data, shape), lab)
        return self._padded[stride]


@dataclass
class Dataset:
    cases: list
    name: str = ""

    def __len__(self):
        return len(self.cases)

    @property
    def parts(self):
        return sorted({c.part for c in self.cases})

    @property
    def n_channels(self):
        chans = {c.volume.n_channels for c in self.cases}
        if len(chans) != 1:
            raise ShapeError(f"dataset {self.name!r} mixes channel counts {sorted(chans)}")
        return chans.pop()

    def union(self, other: "Dataset", name="") -> "Dataset":
        return Dataset(self.cases + other.cases, name or f"{self.name}&{other.name}")


def adapt_volume_channels(v: Volume, n_channels: int) -> Volume:
    """Reconcile channel counts at the data level: fat+water -> fat only;
    a single channel -> (channel, zeros)."""
    if v.n_channels == n_channels:
        return v
    if n_channels == 1:
        return Volume(v.data[:1], v.spacing, v.origin, v.cohort, "T1-FSE")
    data = np.concatenate([v.data, np.zeros_like(v.data)], axis=0)
    return Volume(data, v.spacing, v.origin, v.cohort, "Dixon-fat+water")


def dataset_from_cohort(cohort, indices, n_channels=None, name=None) -> Dataset:
    cases = []
    for i in indices:
        vol, mask, _ = cohort.phantom(i)
        vol = normalize_volume(vol)
        if n_channels is not None:
            vol = adapt_volume_channels(vol, n_channels)
        cases.append(Case(cohort.subjects[i]["id"], vol, mask.labels, cohort.name))
    return Dataset(cases, name or cohort.name)


# -------------------------------------------------------------- sampling

def epoch_plan(data: Dataset, n: int, rng, stride: int = 16) -> list[tuple[int, int]]:
    """``n`` (case index, grid index) pairs for one epoch.

    Patches are shared out between the dataset's parts in proportion to
    their size (at least one each), so a shuffled union always mixes both
    cohorts."""
    by_part: dict[str, list[int]] = {}
    for i, c in enumerate(data.cases):
        by_part.setdefault(c.part, []).append(i)
    parts = sorted(by_part)
    if n < len(parts):
        raise ValueError(f"{n} patches per epoch cannot cover {len(parts)} dataset parts")
    sizes = np.array([len(by_part[p]) for p in parts], dtype=np.float64)
    quota = np.maximum(1, np.floor(n * sizes / sizes.sum())).astype(int)
    order = np.argsort(-(n * sizes / sizes.sum() - quota), kind="stable")
    k = 0
    while quota.sum() < n:
        quota[order[k % len(parts)]] += 1
        k += 1
    while quota.sum() > n:
        quota[int(np.argmax(quota))] -= 1
    plan = []
    for p, q in zip(parts, quota):
        idx = by_part[p]
        for _ in range(q):
            ci = idx[int(rng.integers(len(idx)))]
            plan.append((ci, int(rng.integers(len(data.cases[ci].padded(stride)[0])))))
    perm = rng.permutation(len(plan))
    return [plan[i] for i in perm]


def make_batch(data: Dataset, items, stride=16):
    patches, labels, positions, starts = [], [], [], []
    for ci, gi in items:
        case = data.cases[ci]
        grid, shape, vol, lab = case.padded(stride)
        s = grid[gi:gi + 1]
        patches.append(crop(vol, s)[0])
        labels.append(crop(lab, s)[0])
        positions.append(positions_for(s, case.volume.shape)[0])
        starts.append(s[0])
    return PatchBatch(np.stack(patches), np.stack(positions), np.stack(starts)), np.stack(labels)


# ------------------------------------------------------------ prediction

def predict_volume(net: Network, volume: Volume, stride: int = 16, batch_size: int = 8):
    """Sliding-window inference on a normalized volume; returns
    ``(probs [4, Z, Y, X], labels [Z, Y, X])``."""
    if volume.n_channels != net.in_channels:
        volume = adapt_volume_channels(volume, net.in_channels)
    starts, padded = patch_grid(volume.shape, stride)
    data = pad_to(volume.data, padded)
    acc = Accumulator(4, padded)
    for lo in range(0, len(starts), batch_size):
        s = starts[lo:lo + batch_size]
        batch = PatchBatch(crop(data, s), positions_for(s, volume.shape), s, padded, volume.shape)
        _, probs = net_forward(net, batch, "infer")
        acc.add(probs.data, s)
    return acc.result(volume.shape)


def evaluate_dataset(net: Network, data: Dataset, stride: int = 16, database: str = "", fold=None):
    """Pooled report over all cases plus the per-case reports."""
    preds, truths, per_case = [], [], []
    for case in data.cases:
        _, lab = predict_volume(net, case.volume, stride)
        per_case.append(evaluate_mask(lab, case.labels, fold, database))
        preds.append(lab.ravel())
        truths.append(case.labels.ravel())
    pooled = evaluate_mask(np.concatenate(preds), np.concatenate(truths), fold, database)
    return pooled, per_case


def macro_dice_on(net: Network, data: Dataset, stride: int) -> float:
    reps = evaluate_dataset(net, data, stride)[1]
    return float(np.mean([r.macro_dice() for r in reps]))


# -------------------------------------------------------------- training

@dataclass
class TrainResult:
    net: Network
    history: list
    best_epoch: int
    best_val: float


def train_step(net: Network, opt: RMSprop, batch: PatchBatch, labels, cfg: TrainConfig):
    tape = Tape()
    _, probs = net_forward(net, batch, "train", tape)
    target = Tensor(one_hot(labels, 4, probs.dtype))
    attrs = OpAttrs(coeffs=(cfg.lambda_focal, cfg.lambda_tpr, cfg.lambda_jac), gamma=cfg.gamma)
    loss = op_forward("seg_loss", [probs, target], attrs, tape)
    grads = backward(tape, loss.id)
    opt.step(net.params, {name: grads[t.id] for name, t in net.params.items()})
    return float(loss.data)


def train(net: Network, train_set: Dataset, val_set: Dataset, cfg: TrainConfig,
          epochs: int | None = None, val_fn=None, stream: str = "train", log=None) -> TrainResult:
    """RMSprop training with early stopping on validation macro Dice.

    Each epoch draws ``cfg.patches_per_epoch`` patches. Training stops once
    ``cfg.patience`` epochs in a row fail to beat the best validation score;
    the returned network carries the best epoch's weights and batch-norm
    statistics. ``val_fn(net, epoch)`` overrides the validation metric.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("training and validation sets must be non-empty")
    if {c.case_id for c in train_set.cases} & {c.case_id for c in val_set.cases}:
        raise ValueError("validation cases overlap the training cases")
    if train_set.n_channels != net.in_channels:
        raise ShapeError(f"network takes {net.in_channels} channel(s) but the training data has "
                         f"{train_set.n_channels}; adapt the network first")
    epochs = cfg.max_epochs if epochs is None else epochs
    opt = RMSprop(cfg.lr, cfg.rho, cfg.eps)
    history = []
    best, best_epoch, best_state = -math.inf, -1, net.state()
    stale = 0
    for epoch in range(epochs):
        rng = rng_for(cfg.seed, stream, "epoch", epoch)
        plan = epoch_plan(train_set, cfg.patches_per_epoch, rng, cfg.train_stride)
        losses_ = []
        for lo in range(0, len(plan), cfg.batch_size):
            batch, labels = make_batch(train_set, plan[lo:lo + cfg.batch_size], cfg.train_stride)
            losses_.append(train_step(net, opt, batch, labels, cfg))
        val = val_fn(net, epoch) if val_fn else macro_dice_on(net, val_set, cfg.val_stride)
        row = dict(epoch=epoch, loss=float(np.mean(losses_)), val_macro_dice=float(val))
        history.append(row)
        if log:
            log(row)
        if val > best:
            best, best_epoch, best_state, stale = val, epoch, net.state(), 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    net.load_state(best_state)
    return TrainResult(net, history, best_epoch, best)


# ------------------------------------------------------------- scenarios

@dataclass
class Scenario:
    kind: str
    a: str = "A"
    b: str = "B"
    pretrain_fraction: float = 0.4

    def __post_init__(self):
        if self.kind not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.kind!r}; choose from {SCENARIOS}")
        if not 0 < self.pretrain_fraction < 1:
            raise ValueError("pretrain_fraction must lie in (0, 1)")

    def pretrain_epochs(self, epochs: int) -> int:
        return math.ceil(self.pretrain_fraction * epochs)

    def test_databases(self) -> tuple:
        return {"intra": (self.a,), "inter": (self.b,), "transfer": (self.b, self.a),
                "joint": (self.a, self.b)}[self.kind]


@dataclass
class ScenarioResult:
    scenario: Scenario
    nets: dict  # stage name -> Network
    reports: dict  # database -> pooled MetricsReport
    per_case: dict  # database -> list of MetricsReport
    history: list = field(default_factory=list)


def _new_net(model: str, net_config: dict, in_channels: int, seed: int) -> Network:
    cfg = dict(net_config)
    cfg["in_channels"] = in_channels
    return build_network(model, cfg, seed)


def run_scenario(s: Scenario, cohorts: dict, cfg: TrainConfig, model: str = "dcnet",
                 net_config: dict | None = None, fold: int = 0, pretrained: Network | None = None,
                 log=None) -> ScenarioResult:
    """Train for one scenario and evaluate on its test databases.

    ``cohorts`` maps database names to :class:`~adiposeg.phantom.Cohort`.
    Only the databases the scenario uses are read. ``pretrained`` lets
    intra and inter share one network trained on A.
    """
    net_config = net_config or {}
    init_seed = derive_seed(cfg.seed, "init", model, fold)
    A = cohorts[s.a]
    need_b = s.kind != "intra"
    B = cohorts[s.b] if need_b else None

    def split(cohort, which, ch=None):
        return dataset_from_cohort(cohort, cohort.split(fold, which), ch)

    history, nets = [], {}
    if s.kind in ("intra", "inter"):
        if pretrained is not None:
            net = pretrained
        else:
            tr, va = split(A, "train"), split(A, "val")
            net = _new_net(model, net_config, tr.n_channels, init_seed)
            res = train(net, tr, va, cfg, stream=f"{s.a}/train", log=log)
            net, history = res.net, [dict(stage=s.a, **h) for h in res.history]
        nets["model"] = net
    elif s.kind == "transfer":
        pre = s.pretrain_epochs(cfg.max_epochs)
        tr, va = split(A, "train"), split(A, "val")
        net = _new_net(model, net_config, tr.n_channels, init_seed)
        res = train(net, tr, va, cfg, epochs=pre, stream=f"{s.a}/pretrain", log=log)
        history += [dict(stage=f"pretrain:{s.a}", **h) for h in res.history]
        nets["pretrained"] = res.net
        trb, vab = split(B, "train"), split(B, "val")
        net = adapt_input_channels(res.net, trb.n_channels, derive_seed(cfg.seed, "adapter", fold))
        res = train(net, trb, vab, cfg, epochs=cfg.max_epochs - pre, stream=f"{s.b}/finetune", log=log)
        history += [dict(stage=f"finetune:{s.b}", **h) for h in res.history]
        nets["model"] = res.net
        net = res.net
    else:  # joint: shuffled union, reduced to the smaller channel count
        ch = min(A.spec(0).n_channels, B.spec(0).n_channels)
        tr = split(A, "train", ch).union(split(B, "train", ch))
        va = split(A, "val", ch).union(split(B, "val", ch))
        net = _new_net(model, net_config, ch, init_seed)
        res = train(net, tr, va, cfg, stream=f"{s.a}&{s.b}/train", log=log)
        history = [dict(stage=f"joint:{s.a}&{s.b}", **h) for h in res.history]
        net = nets["model"] = res.net

    reports, per_case = {}, {}
    for db in s.test_databases():
        cohort = cohorts[db]
        test = split(cohort, "test")
        pooled, cases = evaluate_dataset(net, test, cfg.test_stride, db, fold)
        reports[db], per_case[db] = pooled, cases
    return ScenarioResult(s, nets, reports, per_case, history)
