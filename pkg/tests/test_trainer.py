import csv
import zlib
from collections import Counter

import numpy as np
import pytest
import torch

from dcmil import metrics
from dcmil.core import Bag, RiskStatus, Source, SurvivalRecord, TilePyramid
from dcmil.dataio import SyntheticSpec, generate_cohort
from dcmil.encoder import MultiScaleEncoder
from dcmil.softbag import SoftBagModel
from dcmil.trainer import (
    LeakageLog,
    c2_batch_loss,
    crossval_run,
    extract_representations,
    fold_partition,
    load_c1,
    load_c2,
    make_batches,
    make_folds,
    save_c1,
    save_c2,
    balanced_self_paced,
    self_paced_lambda,
    shuffle_survival,
    train_curriculum1,
    train_curriculum2,
    write_metrics,
)
from helpers import tiny_config


@pytest.fixture(scope="module")
def cohort():
    bags, _ = generate_cohort(SyntheticSpec(n_patients=18, n_normals=3, instances_per_bag=(2, 3), tile_side=32,
                                            S=2, rng_seed=0))
    return bags


def tumors_of(bags):
    return [b for b in bags if b.source is Source.TUMOR]


def _same_state(a, b):
    sa, sb = a.state_dict(), b.state_dict()
    return sa.keys() == sb.keys() and all(torch.equal(sa[k], sb[k]) for k in sa)


# --- curriculum I ----------------------------------------------------------

def test_zero_epochs_returns_seeded_initialization(cohort):
    cfg = tiny_config(epochs_pretrain=0, epochs_joint=0)
    a, hist = train_curriculum1(tumors_of(cohort), cfg, seed=5)
    torch.manual_seed(5)
    fresh = MultiScaleEncoder(cfg)
    assert _same_state(a, fresh)
    assert hist["pretrain"] == [] and hist["joint"] == []


def test_curriculum1_is_deterministic(cohort):
    cfg = tiny_config()
    a, ha = train_curriculum1(tumors_of(cohort), cfg, seed=1)
    b, hb = train_curriculum1(tumors_of(cohort), cfg, seed=1)
    assert _same_state(a, b)
    assert ha == hb


def test_curriculum1_needs_both_labels(cohort):
    only_high = [b for b in tumors_of(cohort) if b.risk_status is RiskStatus.HIGH]
    with pytest.raises(ValueError, match="HIGH and LOW"):
        train_curriculum1(only_high, tiny_config())


def test_checkpoints_roundtrip(cohort, tmp_path):
    cfg = tiny_config(epochs_pretrain=0, epochs_joint=0, epochs_c2=0)
    enc, _ = train_curriculum1(tumors_of(cohort), cfg)
    save_c1(enc, tmp_path)
    assert _same_state(load_c1(cfg, tmp_path), enc)
    sb = SoftBagModel(cfg, cfg.token_dim)
    save_c2(sb, tmp_path)
    assert _same_state(load_c2(cfg, tmp_path), sb)


def test_missing_checkpoint_raises(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_c2(tiny_config(), tmp_path)


def test_self_paced_threshold_ramps_and_finally_admits_all():
    losses = torch.tensor([0.1, 0.2, 0.4, 0.8, 1.6])
    lams = [self_paced_lambda(e, 4, losses) for e in range(4)]
    assert lams[0] == pytest.approx(float(torch.quantile(losses.double(), 0.25)))
    assert lams[0] < lams[1] < lams[2]
    assert lams[3] == float("inf")


def test_balanced_self_paced_admits_both_labels_from_the_start():
    # the HIGH instances are all easier than the LOW ones; a single threshold
    # at the 25th percentile would admit HIGH instances only
    initial = torch.tensor([0.01, 0.02, 0.03, 0.04, 0.9, 1.0, 1.1, 1.2])
    y = torch.tensor([1, 1, 1, 1, 0, 0, 0, 0.0])
    chosen = balanced_self_paced(initial, initial, y, 0, 4)
    assert {int(y[i]) for i in chosen} == {0, 1}
    assert balanced_self_paced(initial, initial, y, 3, 4) == list(range(8))


# --- curriculum II ---------------------------------------------------------

def test_make_batches_rejects_tiny_batches(cohort):
    with pytest.raises(ValueError):
        make_batches(tumors_of(cohort), 1, np.random.default_rng(0))


def test_make_batches_partitions_with_both_labels(cohort):
    tumors = tumors_of(cohort)
    batches = make_batches(tumors, 4, np.random.default_rng(0))
    ids = sorted(b.patient_id for batch in batches for b in batch)
    assert ids == sorted(b.patient_id for b in tumors)
    for batch in batches:
        counts = Counter(b.risk_status for b in batch)
        assert counts[RiskStatus.HIGH] >= 2 and counts[RiskStatus.LOW] >= 2


@pytest.fixture(scope="module")
def reps(cohort):
    enc, _ = train_curriculum1(tumors_of(cohort), tiny_config(epochs_pretrain=0, epochs_joint=0))
    return extract_representations(enc, cohort)


def test_curriculum2_zero_epochs_returns_initialization(cohort, reps):
    cfg = tiny_config(epochs_c2=0)
    model, hist = train_curriculum2(reps, tumors_of(cohort), cfg, seed=3)
    torch.manual_seed(3)
    assert _same_state(model, SoftBagModel(cfg, cfg.token_dim))
    assert hist["train"] == []


def test_curriculum2_step_decreases_loss(cohort, reps):
    # one small step along the gradient of a fixed batch must not raise its loss
    cfg = tiny_config()
    torch.manual_seed(0)
    model = SoftBagModel(cfg, cfg.token_dim)
    batch = tumors_of(cohort)[:8]
    normals = [b for b in cohort if b.source is Source.NORMAL]
    opt = torch.optim.SGD(model.parameters(), lr=1e-6)
    before = c2_batch_loss(model, reps, batch, normals, None, cfg, noise_on=False)
    opt.zero_grad()
    before.backward()
    opt.step()
    with torch.no_grad():
        after = c2_batch_loss(model, reps, batch, normals, None, cfg, noise_on=False)
    assert float(after) <= float(before.detach())


def test_curriculum2_update_is_norm_clipped(cohort, reps):
    # the first SGD step (empty momentum buffer) moves the parameters by at most lr * clip
    cfg = tiny_config(epochs_c2=1, lr_c2=0.5, grad_clip_c2=0.01, batch_size_c2=64)
    torch.manual_seed(cfg.rng_seed)
    start = SoftBagModel(cfg, cfg.token_dim)
    model, _ = train_curriculum2(reps, tumors_of(cohort), cfg, normal_bags=[])
    with torch.no_grad():
        step = torch.sqrt(sum(((a - b) ** 2).sum() for a, b in zip(model.parameters(), start.parameters())))
    assert 0 < float(step) <= 0.5 * 0.01 + 1e-7


# --- folds and bookkeeping -------------------------------------------------

def test_make_folds_deterministic_and_stratified(cohort):
    a = make_folds(cohort, 3, seed=4)
    assert a == make_folds(cohort, 3, seed=4)
    assert set(a.assignments) == {b.patient_id for b in tumors_of(cohort)}
    for status in RiskStatus:
        per_fold = Counter(a.assignments[b.patient_id] for b in tumors_of(cohort) if b.risk_status is status)
        counts = [per_fold[f] for f in range(3)]
        assert max(counts) - min(counts) <= 1


def test_fold_partition_keeps_test_out_of_training(cohort):
    plan = make_folds(cohort, 3)
    train, val, test, normals = fold_partition(cohort, plan, 1, tiny_config())
    test_ids = {b.patient_id for b in test}
    assert test_ids.isdisjoint(b.patient_id for b in train + val)
    assert len(train) + len(val) + len(test) == len(tumors_of(cohort))
    with pytest.raises(ValueError):
        fold_partition(cohort, plan, 3, tiny_config())


def test_leakage_log_refuses_test_patients(tmp_path):
    log = LeakageLog(tmp_path / "ids.log", ["T1"])
    log("c2-0", 0, ["A", "B"])
    with pytest.raises(RuntimeError, match="T1"):
        log("c2-0", 1, ["A", "T1"])
    log.close()


def test_shuffle_survival_permutes_records(cohort):
    shuffled = shuffle_survival(cohort, 0)
    before = sorted(b.survival.time_months for b in tumors_of(cohort))
    after = sorted(b.survival.time_months for b in tumors_of(shuffled))
    assert before == after
    assert [b.survival for b in tumors_of(cohort)] != [b.survival for b in tumors_of(shuffled)]


def test_summary_rows_recompute_from_files(tmp_path):
    rows = [{"fold": str(i), "c_index": c, "logrank_p": 0.1, "n_patients": 4} for i, c in enumerate([0.6, 0.7, 0.9])]
    rng = np.random.default_rng(0)
    preds = [(i // 4, f"P{i}", float(rng.integers(1, 60)), int(rng.integers(0, 2)), float(rng.normal()), i % 2)
             for i in range(12)]
    write_metrics(tmp_path, tiny_config(), rows, preds)
    with open(tmp_path / "metrics.csv") as fh:
        table = {r["fold"]: r for r in csv.DictReader(fh)}
    cs = [float(table[str(i)]["c_index"]) for i in range(3)]
    assert float(table["mean"]["c_index"]) == pytest.approx(np.mean(cs), abs=1e-9)
    assert float(table["std"]["c_index"]) == pytest.approx(np.std(cs), abs=1e-9)
    with open(tmp_path / "exports" / "predictions.csv") as fh:
        p = list(csv.DictReader(fh))
    t = np.array([float(r["time_months"]) for r in p])
    e = np.array([int(r["event"]) for r in p])
    g = np.array([r["high_group"] == "1" for r in p])
    _, pooled = metrics.logrank_test((t[g], e[g]), (t[~g], e[~g]))
    assert float(table["pooled"]["logrank_p"]) == pytest.approx(pooled, rel=1e-8)


def test_crossval_fold_logs_no_test_ids(cohort, tmp_path):
    cfg = tiny_config()
    summary = crossval_run(cohort, cfg, tmp_path, folds=[0])
    plan = make_folds(cohort, cfg.k_folds, cfg.rng_seed)
    test_ids = set(plan.test_ids(0))
    lines = (tmp_path / "fold_0" / "training_ids.log").read_text().splitlines()
    assert lines
    for line in lines:
        assert test_ids.isdisjoint(line.split("\t")[3].split(";"))
    assert len(summary["folds"]) == 1
    assert (tmp_path / "fold_0" / "c2.pt").exists()


def _bag(pid, time, event):
    rng = np.random.default_rng(zlib.crc32(pid.encode()))
    inst = TilePyramid((rng.random((16, 16)).astype(np.float32), rng.random((32, 32)).astype(np.float32)))
    return Bag(pid, (inst, inst), SurvivalRecord(time, event))


def test_fold_without_events_raises(tmp_path):
    # two deaths land in folds 0 and 1; every survivor is censored, so fold 2 has no events
    bags = [_bag("H1", 5.0, 1), _bag("H2", 9.0, 1)] + [_bag(f"L{i}", 40.0 + i, 0) for i in range(7)]
    cfg = tiny_config(val_fraction=0.0)
    with pytest.raises(ValueError, match="no events"):
        crossval_run(bags, cfg, tmp_path, folds=[2])
