"""Both curricula end to end, k-fold cross-validation and run-directory artifacts."""

from __future__ import annotations

import copy
import csv
import dataclasses
import hashlib
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from . import metrics
from .core import Bag, RiskStatus, RunConfig, Source, SurvivalRecord
from .encoder import (
    MultiScaleEncoder,
    loss_c1,
    loss_empirical,
    loss_ranking,
    loss_structural,
    self_paced_select,
)
from .softbag import (
    SoftBagModel,
    aggregate_K,
    loss_adc,
    loss_c2,
    loss_cox,
    loss_tcl,
    tcl_logits,
)

log = logging.getLogger(__name__)

METRICS_COLUMNS = ["fold", "dataset", "c_index", "logrank_p", "n_patients"]


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)


def ids_digest(ids) -> str:
    return hashlib.sha256(",".join(sorted(ids)).encode()).hexdigest()[:16]


# ----------------------------------------------------------------------
# folds


@dataclass
class FoldPlan:
    k: int
    assignments: dict  # patient_id -> fold index

    def test_ids(self, fold: int) -> list:
        return [pid for pid, f in self.assignments.items() if f == fold]

    def train_ids(self, fold: int) -> list:
        return [pid for pid, f in self.assignments.items() if f != fold]


def make_folds(bags, k: int = 5, seed: int = 0) -> FoldPlan:
    """Stratified assignment of tumor patients to ``k`` folds; normals are left out."""
    tumors = [b for b in bags if b.source is Source.TUMOR]
    if len(tumors) < k:
        raise ValueError(f"need at least {k} tumor patients for {k}-fold cross-validation")
    rng = np.random.default_rng(seed)
    assignments = {}
    offset = 0
    for status in (RiskStatus.HIGH, RiskStatus.LOW, RiskStatus.UNDEFINED):
        ids = sorted(b.patient_id for b in tumors if b.risk_status is status)
        for j, i in enumerate(rng.permutation(len(ids))):
            assignments[ids[i]] = (offset + j) % k
        offset += len(ids)
    return FoldPlan(k, {pid: assignments[pid] for pid in sorted(assignments)})


def stratified_split(bags, fraction: float, seed: int):
    """Split bags into (train, validation) keeping the risk-status mix."""
    rng = np.random.default_rng(seed)
    train, val = [], []
    for status in (RiskStatus.HIGH, RiskStatus.LOW, RiskStatus.UNDEFINED):
        group = sorted((b for b in bags if b.risk_status is status), key=lambda b: b.patient_id)
        order = rng.permutation(len(group))
        n_val = int(round(fraction * len(group)))
        val += [group[i] for i in order[:n_val]]
        train += [group[i] for i in order[n_val:]]
    return train, val


def shuffle_survival(bags, seed: int):
    """Permute survival records across tumor bags (negative control)."""
    rng = np.random.default_rng(seed)
    tumors = [i for i, b in enumerate(bags) if b.source is Source.TUMOR]
    perm = rng.permutation(len(tumors))
    out = list(bags)
    for dst, src in zip(tumors, perm):
        out[dst] = dataclasses.replace(bags[dst], survival=bags[tumors[src]].survival)
    return out


# ----------------------------------------------------------------------
# curriculum I


def bag_levels(bag: Bag, S: int):
    return [torch.from_numpy(bag.level(s)) for s in range(S)]


class InstanceSet:
    """Instances of labeled bags flattened into level tensors."""

    def __init__(self, bags, S: int):
        self.bags = [b for b in bags if b.risk_status is not RiskStatus.UNDEFINED]
        per_bag = [bag_levels(b, S) for b in self.bags]
        self.levels = [torch.cat([lv[s] for lv in per_bag]) if per_bag else torch.empty(0) for s in range(S)]
        self.y = torch.cat([torch.full((b.n_instances,), float(b.risk_status.value)) for b in self.bags]) \
            if self.bags else torch.empty(0)
        self.bag_index = torch.cat([torch.full((b.n_instances,), i) for i, b in enumerate(self.bags)]) \
            if self.bags else torch.empty(0, dtype=torch.long)
        self.patient_ids = [b.patient_id for b in self.bags]

    def __len__(self):
        return int(self.y.shape[0])

    def take(self, idx):
        return [lv[idx] for lv in self.levels], self.y[idx], self.bag_index[idx]

    def ids_of(self, idx) -> list:
        return sorted({self.patient_ids[int(i)] for i in self.bag_index[idx]})


def c1_objective(model: MultiScaleEncoder, levels, y, bag_index, n_branches: int, cfg: RunConfig):
    out = model(levels, n_branches=n_branches)
    p_high = torch.stack([p[:, 1] for p in out["p"]], dim=1)
    l_emp = loss_empirical(p_high, y, bag_index)
    if n_branches == 1:
        return l_emp
    omega = sum(loss_structural(model.branches[s], model.branches[s - 1], s + 1) for s in range(1, n_branches))
    rank = loss_ranking(p_high, y, cfg.eta)
    return loss_c1(l_emp, omega, rank, cfg.beta_omega, cfg.beta_R)


def instance_losses(model: MultiScaleEncoder, data: InstanceSet, chunk: int = 256) -> torch.Tensor:
    """Per-instance cross-entropy averaged over branches (parameters fixed)."""
    vals = []
    for start in range(0, len(data), chunk):
        idx = torch.arange(start, min(start + chunk, len(data)))
        levels, y, _ = data.take(idx)
        with torch.enable_grad():
            out = model(levels)
        p = torch.stack([q[:, 1] for q in out["p"]], dim=1).detach().clamp(1e-7, 1 - 1e-7)
        yy = y[:, None]
        vals.append(-(yy * torch.log(p) + (1 - yy) * torch.log(1 - p)).mean(dim=1))
    return torch.cat(vals) if vals else torch.empty(0)


def evaluate_c1(model, data: InstanceSet, cfg: RunConfig, chunk: int = 256) -> float:
    if len(data) == 0:
        return float("nan")
    total, weight = 0.0, 0
    for start in range(0, len(data), chunk):
        idx = torch.arange(start, min(start + chunk, len(data)))
        levels, y, bi = data.take(idx)
        with torch.enable_grad():
            loss = c1_objective(model, levels, y, bi, model.S, cfg)
        total += float(loss.detach()) * len(idx)
        weight += len(idx)
    return total / weight


def self_paced_lambda(epoch: int, n_epochs: int, initial_losses: torch.Tensor) -> float:
    """Linear ramp from the 25th to the 100th percentile of epoch-0 losses; the last epoch admits everything."""
    if epoch >= n_epochs - 1 or initial_losses.numel() == 0:
        return float("inf")
    lo = float(torch.quantile(initial_losses.double(), 0.25))
    hi = float(initial_losses.max())
    return lo + (hi - lo) * epoch / max(n_epochs - 1, 1) + 1e-12


def balanced_self_paced(losses: torch.Tensor, initial: torch.Tensor, y: torch.Tensor, epoch: int,
                        n_epochs: int) -> list:
    """Self-paced selection run separately within each label.

    A single threshold over all instances admits almost only one class early
    on (the confidently classified one), which drives the joint phase to a
    constant prediction. Each label gets its own pace from its own epoch-0
    losses.
    """
    chosen = []
    for label in (0.0, 1.0):
        idx = torch.nonzero(y == label).flatten()
        if idx.numel() == 0:
            continue
        lam = self_paced_lambda(epoch, n_epochs, initial[idx])
        chosen += [int(idx[i]) for i in self_paced_select(losses[idx].tolist(), lam)]
    return sorted(chosen)


def train_curriculum1(train_bags, cfg: RunConfig, val_bags=(), seed: Optional[int] = None,
                      step_log: Optional[Callable] = None):
    """Pre-train branch 1, share it into the finer branches, then train jointly.

    Returns ``(model, history)``. ``step_log(phase, step, patient_ids)`` is
    called with the patients that fed every parameter update.
    """
    seed = cfg.rng_seed if seed is None else seed
    seed_everything(seed)
    gen = torch.Generator().manual_seed(seed)
    model = MultiScaleEncoder(cfg)
    history = {"pretrain": [], "joint": [], "val": [], "selected": []}
    data = InstanceSet([b for b in train_bags if b.source is Source.TUMOR], cfg.S)
    val = InstanceSet([b for b in val_bags if b.source is Source.TUMOR], cfg.S)
    if cfg.epochs_pretrain == 0 and cfg.epochs_joint == 0:
        return model, history
    if len(data) == 0 or not (data.y == 1).any() or not (data.y == 0).any():
        raise ValueError("curriculum I needs both HIGH and LOW labeled instances")

    def run_epoch(opt, idx_pool, n_branches, phase, epoch):
        perm = idx_pool[torch.randperm(len(idx_pool), generator=gen)]
        losses = []
        model.train()
        for step, start in enumerate(range(0, len(perm), cfg.batch_size_c1)):
            idx = perm[start:start + cfg.batch_size_c1]
            levels, y, bi = data.take(idx)
            loss = c1_objective(model, levels, y, bi, n_branches, cfg)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
            if step_log is not None:
                step_log(f"{phase}{epoch}", step, data.ids_of(idx))
        return float(np.mean(losses))

    everything = torch.arange(len(data))
    opt = torch.optim.Adam(model.branches[0].parameters(), lr=cfg.lr_c1)
    for epoch in range(cfg.epochs_pretrain):
        history["pretrain"].append(run_epoch(opt, everything, 1, "pretrain", epoch))

    if cfg.epochs_joint > 0 and cfg.S > 1:
        model.share_from_first()
        opt = torch.optim.Adam(model.parameters(), lr=cfg.lr_c1)
        initial = instance_losses(model, data) if cfg.self_paced else None
        best, best_state, stale = float("inf"), copy.deepcopy(model.state_dict()), 0
        for epoch in range(cfg.epochs_joint):
            pool = everything
            if cfg.self_paced:
                cur = initial if epoch == 0 else instance_losses(model, data)
                chosen = balanced_self_paced(cur, initial, data.y, epoch, cfg.epochs_joint)
                if chosen:
                    pool = torch.tensor(chosen, dtype=torch.long)
                history["selected"].append(len(pool))
            history["joint"].append(run_epoch(opt, pool, model.S, "joint", epoch))
            model.eval()
            v = evaluate_c1(model, val, cfg) if len(val) else history["joint"][-1]
            history["val"].append(v)
            if v < best - 1e-12:
                best, best_state, stale = v, copy.deepcopy(model.state_dict()), 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    break
        model.load_state_dict(best_state)
    model.eval()
    return model, history


def extract_representations(model: MultiScaleEncoder, bags, chunk: int = 256) -> dict:
    """``patient_id -> {"g": (N_n, C), "p": (N_n, S) high-risk probs}``."""
    model.eval()
    out = {}
    for bag in bags:
        levels = bag_levels(bag, model.S)
        gs, ps = [], []
        for start in range(0, bag.n_instances, chunk):
            sl = [lv[start:start + chunk] for lv in levels]
            with torch.enable_grad():
                res = model(sl)
            gs.append(res["g"][-1].detach())
            ps.append(torch.stack([p[:, 1] for p in res["p"]], dim=1).detach())
        out[bag.patient_id] = {"g": torch.cat(gs).numpy(), "p": torch.cat(ps).numpy()}
    return out


# ----------------------------------------------------------------------
# curriculum II


def make_batches(bags, batch_size: int, rng: np.random.Generator) -> list:
    """Deal bags into batches so each batch has at least two bags per risk source."""
    if batch_size < 2:
        raise ValueError("curriculum II needs batches of at least 2 tumor bags")
    groups = {s: [b for b in bags if b.risk_status is s] for s in RiskStatus}
    for s in (RiskStatus.HIGH, RiskStatus.LOW):
        if len(groups[s]) < 2:
            raise ValueError(f"curriculum II needs at least two {s.name} bags")
    n_batches = max(1, int(np.ceil(len(bags) / batch_size)))
    n_batches = min(n_batches, len(groups[RiskStatus.HIGH]) // 2, len(groups[RiskStatus.LOW]) // 2)
    batches = [[] for _ in range(n_batches)]
    for s in (RiskStatus.HIGH, RiskStatus.LOW, RiskStatus.UNDEFINED):
        g = groups[s]
        for j, i in enumerate(rng.permutation(len(g))):
            batches[j % n_batches].append(g[i])
    return batches


class NormalBuffer:
    """Detached normal-bag representations from previous batches."""

    def __init__(self, size: int):
        self.size = size
        self.items: list = []

    def extend(self, reps: torch.Tensor) -> None:
        self.items.extend(r.detach().clone() for r in reps)
        self.items = self.items[-self.size:] if self.size > 0 else []

    def tensor(self, like: torch.Tensor) -> torch.Tensor:
        return torch.stack(self.items) if self.items else like.new_zeros((0, like.shape[-1]))


def c2_batch_loss(model: SoftBagModel, reps: dict, batch, normals, buffer: Optional[NormalBuffer],
                  cfg: RunConfig, generator=None, noise_on: bool = True, parts: bool = False):
    as_t = lambda pid: torch.as_tensor(reps[pid]["g"], dtype=torch.get_default_dtype())
    out = [model(as_t(b.patient_id), noise_on, generator) for b in batch]
    B = torch.stack([o.B for o in out])
    B_bar = torch.stack([o.B_bar for o in out])
    risk = torch.stack([o.risk for o in out])
    times = [b.survival.time_months for b in batch]
    events = [b.survival.event for b in batch]
    cox = loss_cox(risk, times, events)

    status = [b.risk_status for b in batch]
    anchors = [i for i, s in enumerate(status) if s is not RiskStatus.UNDEFINED]
    tcl = adc = risk.sum() * 0.0
    normal_reps = [model(as_t(b.patient_id), noise_on, generator).B for b in normals]
    pool = torch.stack(normal_reps) if normal_reps else B.new_zeros((0, B.shape[1]))
    if buffer is not None:
        pool = torch.cat([pool, buffer.tensor(B)])
    if anchors and pool.shape[0] > 0:
        M = len(batch)
        idx = torch.arange(M)
        anc = torch.tensor(anchors)
        others = idx[None, :] != anc[:, None]
        same = torch.tensor([[status[j] is status[a] for j in range(M)] for a in anchors]) & others
        ok = same.any(dim=1)
        if bool(ok.any()):
            anc, others, same = anc[ok], others[ok], same[ok]
            B_under = aggregate_K(pool, model.K1)
            B_tilde = aggregate_K(B, model.K1, others)
            B_hat = aggregate_K(B, model.K1, same)
            pos, neg = tcl_logits(B[anc], B_tilde, B_hat, B_bar[anc], B_under, B, model.W_L, model.V_L)
            tcl = loss_tcl(pos, neg, others)
            adc = loss_adc(B[anc], B_tilde, B_hat, B_bar[anc], B_under.expand_as(B_tilde), cfg.kappa)
    sparse = model.sparseness()
    total = loss_c2(cox, tcl, adc, sparse, cfg.beta_tcl, cfg.beta_adc, cfg.beta_s)
    if buffer is not None and normal_reps:
        buffer.extend(torch.stack(normal_reps))
    if parts:
        return total, {k: float(v.detach()) for k, v in (("cox", cox), ("tcl", tcl), ("adc", adc), ("s", sparse))}
    return total


def predict_risks(model: SoftBagModel, reps: dict, bags) -> np.ndarray:
    model.eval()
    with torch.no_grad():
        return np.array([
            float(model(torch.as_tensor(reps[b.patient_id]["g"], dtype=torch.get_default_dtype())).risk)
            for b in bags
        ])


def validation_cox(model, reps, bags) -> float:
    if not bags or not any(b.survival.event for b in bags):
        return float("nan")
    with torch.no_grad():
        r = torch.as_tensor(predict_risks(model, reps, bags))
        return float(loss_cox(r, [b.survival.time_months for b in bags], [b.survival.event for b in bags]))


def train_curriculum2(reps: dict, train_bags, cfg: RunConfig, val_bags=(), normal_bags=(),
                      seed: Optional[int] = None, step_log: Optional[Callable] = None):
    """SGD with momentum on the curriculum II objective; keeps the best-validation state.

    Returns ``(model, history)``.
    """
    seed = cfg.rng_seed if seed is None else seed
    seed_everything(seed)
    gen = torch.Generator().manual_seed(seed)
    rng = np.random.default_rng(seed)
    in_dim = next(iter(reps.values()))["g"].shape[1] if reps else cfg.token_dim
    model = SoftBagModel(cfg, in_dim)
    history = {"train": [], "val": []}
    tumors = [b for b in train_bags if b.source is Source.TUMOR]
    normals = list(normal_bags)
    if cfg.epochs_c2 == 0:
        return model, history
    if len([b for b in tumors]) < 2:
        raise ValueError("curriculum II needs at least 2 tumor bags")
    opt = torch.optim.SGD(model.parameters(), lr=cfg.lr_c2, momentum=cfg.momentum_c2)
    buffer = NormalBuffer(cfg.normal_buffer_size)
    per_batch_normals = min(len(normals), 4)
    best, best_state = float("inf"), copy.deepcopy(model.state_dict())
    diverged = False
    for epoch in range(cfg.epochs_c2):
        model.train()
        losses = []
        for step, batch in enumerate(make_batches(tumors, cfg.batch_size_c2, rng)):
            chosen = [normals[i] for i in sorted(rng.choice(len(normals), per_batch_normals, replace=False))] \
                if per_batch_normals else []
            loss = c2_batch_loss(model, reps, batch, chosen, buffer, cfg, gen)
            if not torch.isfinite(loss):
                diverged = True
                break
            opt.zero_grad()
            loss.backward()
            if cfg.grad_clip_c2 > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip_c2)
            opt.step()
            losses.append(float(loss.detach()))
            if step_log is not None:
                step_log(f"c2-{epoch}", step, sorted(b.patient_id for b in batch))
        if diverged:
            log.warning("curriculum II loss became non-finite in epoch %d; keeping the best earlier state", epoch)
            break
        history["train"].append(float(np.mean(losses)))
        v = validation_cox(model, reps, list(val_bags))
        if np.isnan(v):
            v = history["train"][-1]
        history["val"].append(v)
        if v < best - 1e-12:
            best, best_state = v, copy.deepcopy(model.state_dict())
    model.load_state_dict(best_state)
    model.eval()
    return model, history


# ----------------------------------------------------------------------
# checkpoints


def save_c1(model: MultiScaleEncoder, fold_dir) -> list:
    fold_dir = Path(fold_dir)
    fold_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for s, br in enumerate(model.branches):
        p = fold_dir / f"c1_branch{s + 1}.pt"
        torch.save({"branch": s + 1, "config_digest": model.cfg.digest(), "state": br.state_dict()}, p)
        paths.append(p)
    return paths


def load_c1(cfg: RunConfig, fold_dir) -> MultiScaleEncoder:
    model = MultiScaleEncoder(cfg)
    for s, br in enumerate(model.branches):
        p = Path(fold_dir) / f"c1_branch{s + 1}.pt"
        if not p.exists():
            raise FileNotFoundError(f"missing curriculum I checkpoint {p}")
        ckpt = torch.load(p, weights_only=True)
        if ckpt["config_digest"] != cfg.digest():
            log.warning("checkpoint %s was written under a different config", p)
        br.load_state_dict(ckpt["state"])
    model.eval()
    return model


def save_c2(model: SoftBagModel, fold_dir) -> Path:
    p = Path(fold_dir) / "c2.pt"
    p.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"config_digest": model.cfg.digest(), "in_dim": model.project.in_features,
                "state": model.state_dict()}, p)
    return p


def load_c2(cfg: RunConfig, fold_dir) -> SoftBagModel:
    p = Path(fold_dir) / "c2.pt"
    if not p.exists():
        raise FileNotFoundError(f"missing curriculum II checkpoint {p}")
    ckpt = torch.load(p, weights_only=True)
    model = SoftBagModel(cfg, ckpt["in_dim"])
    model.load_state_dict(ckpt["state"])
    model.eval()
    return model


def save_representations(reps: dict, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    arrays = {}
    for pid, r in reps.items():
        arrays[f"{pid}/g"] = r["g"]
        arrays[f"{pid}/p"] = r["p"]
    np.savez(path, **arrays)


def load_representations(path) -> dict:
    reps: dict = {}
    with np.load(path) as z:
        for key in z.files:
            pid, kind = key.split("/")
            reps.setdefault(pid, {})[kind] = z[key]
    return reps


def write_indicator_csv(model: SoftBagModel, reps: dict, bags, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["patient_id", "instance_index", "row", "col", "score", "selected"])
        with torch.no_grad():
            for b in bags:
                out = model(torch.as_tensor(reps[b.patient_id]["g"], dtype=torch.get_default_dtype()))
                for i, (sc, h) in enumerate(zip(out.scores.tolist(), out.h_hat.tolist())):
                    r, c = b.instances[i].coordinates
                    w.writerow([b.patient_id, i, r, c, f"{sc:.8g}", int(h)])


# ----------------------------------------------------------------------
# cross-validation


def _fmt(x) -> str:
    return "" if x is None or (isinstance(x, float) and np.isnan(x)) else f"{x:.10g}"


def fold_partition(bags, plan: FoldPlan, fold: int, cfg: RunConfig):
    """``(train, val, test, normals)`` for one fold; the split is fixed by the config seed."""
    if not 0 <= fold < plan.k:
        raise ValueError(f"fold {fold} outside 0..{plan.k - 1}")
    by_id = {b.patient_id: b for b in bags}
    test = [by_id[p] for p in plan.test_ids(fold)]
    train_all = [by_id[p] for p in plan.train_ids(fold)]
    normals = [b for b in bags if b.source is Source.NORMAL]
    train, val = stratified_split(train_all, cfg.val_fraction, cfg.rng_seed + 101 * fold)
    return train, val, test, normals


class LeakageLog:
    """Logs the patients behind every update and refuses test patients."""

    def __init__(self, path, test_ids, mode: str = "w"):
        self.test_ids = set(test_ids)
        self.fh = open(path, mode)

    def __call__(self, phase, step, ids):
        leak = self.test_ids.intersection(ids)
        if leak:
            raise RuntimeError(f"test patients {sorted(leak)} reached a training update")
        self.fh.write(f"{phase}\t{step}\t{ids_digest(ids)}\t{';'.join(ids)}\n")

    def close(self):
        self.fh.close()


def run_fold(bags, plan: FoldPlan, fold: int, cfg: RunConfig, run_dir, progress: Optional[Callable] = None):
    """Train both curricula on one fold; returns held-out predictions."""
    run_dir = Path(run_dir)
    fold_dir = run_dir / f"fold_{fold}"
    fold_dir.mkdir(parents=True, exist_ok=True)
    train, val, test, normals = fold_partition(bags, plan, fold, cfg)
    step_log = LeakageLog(fold_dir / "training_ids.log", plan.test_ids(fold))
    try:
        t0 = time.time()
        enc, h1 = train_curriculum1(train, cfg, val, seed=cfg.rng_seed + fold, step_log=step_log)
        save_c1(enc, fold_dir)
        reps = extract_representations(enc, bags)
        save_representations(reps, run_dir / "exports" / f"fold_{fold}_embeddings.npz")
        t1 = time.time()
        sb, h2 = train_curriculum2(reps, train, cfg, val, normals, seed=cfg.rng_seed + fold, step_log=step_log)
        save_c2(sb, fold_dir)
        t2 = time.time()
    finally:
        step_log.close()
    write_indicator_csv(sb, reps, bags, run_dir / "exports" / f"fold_{fold}_indicators.csv")
    risks = predict_risks(sb, reps, test)
    if progress:
        progress(f"fold {fold}: C-I {t1 - t0:.1f}s, C-II {t2 - t1:.1f}s")
    return {
        "test": test,
        "risks": risks,
        "history_c1": h1,
        "history_c2": h2,
    }


def fold_metrics(test, risks):
    times = np.array([b.survival.time_months for b in test])
    events = np.array([b.survival.event for b in test])
    try:
        c = metrics.concordance_index(times, events, risks)
    except ValueError:
        c = float("nan")
    high = metrics.median_split(risks)
    if high.all() or not high.any():
        p = float("nan")
    else:
        _, p = metrics.logrank_test((times[high], events[high]), (times[~high], events[~high]))
    return c, p, high


def crossval_run(bags, cfg: RunConfig, run_dir, shuffle_labels: bool = False, folds=None,
                 progress: Optional[Callable] = None) -> dict:
    """k-fold cross-validation of the full pipeline.

    Writes ``metrics.csv`` (one row per fold, then ``mean``, ``std`` and
    ``pooled`` rows), ``exports/predictions.csv``, checkpoints and plots.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(run_dir / "config.cfg")
    if shuffle_labels:
        bags = shuffle_survival(bags, cfg.rng_seed + 7)
    plan = make_folds(bags, cfg.k_folds, cfg.rng_seed)
    folds = range(cfg.k_folds) if folds is None else folds
    rows, preds = [], []
    for fold in folds:
        res = run_fold(bags, plan, fold, cfg, run_dir, progress)
        test, risks = res["test"], res["risks"]
        if not any(b.survival.event for b in test):
            raise ValueError(f"fold {fold} has no events")
        c, p, high = fold_metrics(test, risks)
        rows.append({"fold": str(fold), "c_index": c, "logrank_p": p, "n_patients": len(test)})
        for b, r, h in zip(test, risks, high):
            preds.append((fold, b.patient_id, b.survival.time_months, b.survival.event, float(r), int(h)))

    return write_metrics(run_dir, cfg, rows, preds)


def write_metrics(run_dir, cfg: RunConfig, rows, preds) -> dict:
    """Write ``metrics.csv`` and ``exports/predictions.csv``; returns the summary."""
    run_dir = Path(run_dir)
    cs = np.array([r["c_index"] for r in rows], dtype=float)
    times = np.array([p[2] for p in preds])
    events = np.array([p[3] for p in preds])
    grp = np.array([p[5] for p in preds], dtype=bool)
    pooled_p = metrics.logrank_test((times[grp], events[grp]), (times[~grp], events[~grp]))[1] \
        if grp.any() and (~grp).any() else float("nan")
    summary = {
        "mean": float(np.nanmean(cs)),
        "std": float(np.nanstd(cs)),
        "pooled_logrank_p": float(pooled_p),
        "folds": rows,
    }
    with open(run_dir / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_COLUMNS)
        for r in rows:
            w.writerow([r["fold"], cfg.dataset, _fmt(r["c_index"]), _fmt(r["logrank_p"]), r["n_patients"]])
        n = len(preds)
        w.writerow(["mean", cfg.dataset, _fmt(summary["mean"]), "", n])
        w.writerow(["std", cfg.dataset, _fmt(summary["std"]), "", n])
        w.writerow(["pooled", cfg.dataset, "", _fmt(pooled_p), n])
    (run_dir / "exports").mkdir(exist_ok=True)
    with open(run_dir / "exports" / "predictions.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fold", "patient_id", "time_months", "event", "risk", "high_group"])
        for f, pid, t, e, r, h in preds:
            w.writerow([f, pid, _fmt(t), e, _fmt(r), h])
    return summary
