import dataclasses

import numpy as np
import pytest

from boneage.backbone import BackboneConfig
from boneage.dgam import EmaModeError
from boneage.graph import default_schema_document, load_roi_schema
from boneage.pipeline import (ABLATION_ROWS, BoneAgeModel, CheckpointError, TrainConfig, TrainingAborted,
                              ablation_configs, checkpoint_bytes, count_params, evaluate, forward, load_checkpoint,
                              make_batch, mean_absolute_difference, prime_context, run_ablation, save_checkpoint,
                              train, write_log_csv)
from boneage.tensor import Tensor, l1_loss

from conftest import tiny_model_config


def fresh(samples):
    return [dataclasses.replace(s) for s in samples]


# -- forward ------------------------------------------------------------------------------

def test_stub_unit_scores_sum_to_17(tiny_synth):
    model = BoneAgeModel(tiny_model_config(use_pa=False, use_ca=False, score_scale=1.0))
    for block in model.head.blocks:
        block.out.weight.data[...] = 0.0
        block.out.bias.data[...] = 1.0
    recs = forward(model, tiny_synth[:4])
    for r in recs:
        assert r.weighted_scores == [1.0] * 17
        assert r.age == 17.0


def test_bypass_matches_head_only_pipeline(tiny_synth):
    model = BoneAgeModel(tiny_model_config(use_pa=False, use_ca=False))
    model.eval()
    batch = make_batch(tiny_synth[:4])
    out = model(batch)
    direct = model.head(model.pillars(batch)).data * model.config.score_scale
    np.testing.assert_array_equal(out.scores.data, direct)
    np.testing.assert_array_equal(out.weighted.data, direct)
    assert out.feature_attention is None and out.context_attention is None


def test_inference_without_context_ema_raises(tiny_synth):
    model = BoneAgeModel(tiny_model_config())
    with pytest.raises(EmaModeError):
        forward(model, tiny_synth[:2])


def test_missing_roi_center_rejected(tiny_synth):
    model = BoneAgeModel(tiny_model_config(use_ca=False))
    bad = dataclasses.replace(tiny_synth[0], centers=tiny_synth[0].centers[:16])
    with pytest.raises(ValueError, match="17"):
        forward(model, [bad, bad])


def test_train_mode_forward_leaves_buffers(tiny_synth):
    model = BoneAgeModel(tiny_model_config())
    before = {k: v.copy() for k, v in model.named_buffers()}
    recs = forward(model, tiny_synth[:4], mode="train")
    assert len(recs) == 4
    for k, v in model.named_buffers():
        np.testing.assert_array_equal(v, before[k])
    assert not model.ema.maps


def test_frozen_model_is_deterministic(tiny_synth):
    model = BoneAgeModel(tiny_model_config())
    prime_context(model, tiny_synth)
    a = [r.to_dict() for r in forward(model, tiny_synth[:6])]
    b = [r.to_dict() for r in forward(model, tiny_synth[:6])]
    assert a == b


def test_age_is_exact_sum_of_weighted_scores(tiny_synth):
    model = BoneAgeModel(tiny_model_config())
    prime_context(model, tiny_synth)
    for r in evaluate(model, tiny_synth, batch_size=5).records:
        assert r.age == np.sum(np.array(r.weighted_scores))


def test_disabled_attention_gets_no_gradient(tiny_synth):
    model = BoneAgeModel(tiny_model_config(use_pa=False, use_ca=False, grouping="shared"))
    model.train()
    batch = make_batch(tiny_synth[:4])
    out = model(batch)
    l1_loss(out.age, Tensor(batch.ages)).backward()
    for p in model.pab.parameters() + model.cab.parameters():
        assert p.grad is None or not np.any(p.grad)
    assert any(np.any(p.grad) for p in model.head.parameters())


# -- training -----------------------------------------------------------------------------

@pytest.mark.parametrize("epoch, lr", [(0, 1e-3), (59, 1e-3), (60, 1e-4), (119, 1e-4), (120, 1e-5), (199, 1e-5)])
def test_lr_schedule(epoch, lr):
    assert TrainConfig().lr_at(epoch) == pytest.approx(lr, rel=1e-12)


def test_milestones_must_precede_end():
    with pytest.raises(ValueError, match="milestones"):
        TrainConfig(epochs=50).validate()
    assert TrainConfig.scaled(60).milestones == (18, 36)


def test_single_sample_overfits(tiny_synth):
    # batch norm needs two rows, so the single sample is presented twice per step
    s = tiny_synth[0]
    model = BoneAgeModel(tiny_model_config(use_ca=False))
    log = train(model, [s, dataclasses.replace(s, id="dup")], TrainConfig(epochs=200, batch_size=2, milestones=()))
    assert len(log) == 200
    assert log[-1].train_loss < log[0].train_loss
    assert log[-1].train_loss < 0.1 * log[0].train_loss


def test_training_is_bitwise_reproducible(tiny_synth):
    cfg = TrainConfig(epochs=2, batch_size=8, milestones=(1,))
    blobs = []
    for _ in range(2):
        model = BoneAgeModel(tiny_model_config())
        train(model, fresh(tiny_synth[:16]), cfg)
        blobs.append(checkpoint_bytes(model))
    assert blobs[0] == blobs[1]


def test_training_requires_both_genders(tiny_synth):
    girls = [s for s in tiny_synth if s.gender == 0]
    with pytest.raises(ValueError, match="both genders"):
        train(BoneAgeModel(tiny_model_config()), girls, TrainConfig(epochs=1, milestones=()))


def test_nan_loss_aborts_with_last_good_state(tiny_synth):
    cfg = TrainConfig(epochs=3, batch_size=8, milestones=())
    reference = BoneAgeModel(tiny_model_config())
    train(reference, fresh(tiny_synth[:16]), dataclasses.replace(cfg, epochs=1))

    samples = fresh(tiny_synth[:16])

    def poison(row):
        for s in samples:
            s.age_months = float("nan")

    model = BoneAgeModel(tiny_model_config())
    with pytest.raises(TrainingAborted) as info:
        train(model, samples, cfg, progress=poison)
    assert info.value.epoch == 1
    assert checkpoint_bytes(model) == checkpoint_bytes(reference)


def test_log_csv(tmp_path, tiny_synth):
    model = BoneAgeModel(tiny_model_config())
    rows = train(model, fresh(tiny_synth[:16]), TrainConfig(epochs=2, batch_size=8, milestones=(1,)),
                 val_samples=tiny_synth[16:24])
    write_log_csv(tmp_path / "log.csv", rows, header_comment="run")
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[:2] == ["# run", "epoch,lr,train_loss,val_mad"]
    assert len(lines) == 4
    epoch, lr, loss, mad = lines[3].split(",")
    assert (int(epoch), float(lr)) == (1, pytest.approx(1e-4))
    assert float(mad) >= 0


# -- evaluation ---------------------------------------------------------------------------

def test_mad_arithmetic():
    assert mean_absolute_difference([10, 20], [12, 16]) == 3.0
    assert mean_absolute_difference([5.5, 7.0], [5.5, 7.0]) == 0.0
    with pytest.raises(ValueError):
        mean_absolute_difference([], [])


def test_evaluate_empty_rejected():
    with pytest.raises(ValueError, match="empty"):
        evaluate(BoneAgeModel(tiny_model_config(use_ca=False)), [])


def rank_average(x):
    """Ranks 1..n with ties sharing their mean rank."""
    x = np.asarray(x)
    ranks = np.empty(len(x))
    order = sorted(range(len(x)), key=lambda i: x[i])
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and x[order[j + 1]] == x[order[i]]:
            j += 1
        for k in range(i, j + 1):
            ranks[order[k]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


def spearman_oracle(a, b):
    ra, rb = rank_average(a), rank_average(b)
    ra, rb = ra - ra.mean(), rb - rb.mean()
    return float((ra @ rb) / np.sqrt((ra @ ra) * (rb @ rb)))


def test_spearman_matches_rank_oracle(tiny_synth):
    model = BoneAgeModel(tiny_model_config(use_ca=False))
    report = evaluate(model, tiny_synth)
    pred = np.array([r.weighted_scores for r in report.records])
    truth = np.stack([s.scores for s in tiny_synth])
    assert set(report.roi_spearman) == set(model.schema.names)
    for n, name in enumerate(model.schema.names):
        assert report.roi_spearman[name] == pytest.approx(spearman_oracle(pred[:, n], truth[:, n]), abs=1e-12)
    assert len(report.score_table) == 17 * len(tiny_synth)


def test_no_spearman_without_scores(tiny_synth):
    plain = [dataclasses.replace(s, scores=None) for s in tiny_synth[:4]]
    report = evaluate(BoneAgeModel(tiny_model_config(use_ca=False)), plain)
    assert report.roi_spearman is None and report.mean_spearman is None


# -- ablation -----------------------------------------------------------------------------

def test_ablation_rows():
    rows = ablation_configs(tiny_model_config())
    assert [r[0] for r in rows] == [1, 2, 3, 4, 5, 6]
    flags = [(c.grouping, c.use_pa, c.use_ca) for _, _, c in rows]
    assert flags == [("shared", False, False), ("agconv", False, False), ("rgconv", False, False),
                     ("agconv", True, False), ("agconv", False, True), ("agconv", True, True)]
    assert len(ABLATION_ROWS) == 6


def test_ablation_rerun_identical(tiny_synth):
    cfg = TrainConfig(epochs=1, batch_size=8, milestones=())
    args = (tiny_synth[:16], tiny_synth[16:24], tiny_model_config(), cfg)
    first = run_ablation(*args, seeds=(0, 1))
    second = run_ablation(*args, seeds=(0, 1))
    assert len(first) == 6
    assert [r.mads for r in first] == [r.mads for r in second]
    assert all(len(r.mads) == 2 and all(m >= 0 for m in r.mads) for r in first)


# -- parameter counts ---------------------------------------------------------------------

def doubled_schema():
    doc = default_schema_document()
    extra = [{"name": r["name"] + "x", "group": r["group"]} for r in doc["rois"]]
    edges = doc["g1_edges"] + [[a + "x", b + "x"] for a, b in doc["g1_edges"]]
    return load_roi_schema({"rois": doc["rois"] + extra, "g1_edges": edges}, expected_count=34)


def test_head_count_independent_of_roi_count():
    cfg = tiny_model_config()
    small, large = count_params(BoneAgeModel(cfg)), count_params(BoneAgeModel(cfg, doubled_schema()))
    assert small == large


def closed_form(C, head=(8, 4), cab=(8,), pab_depth=2, groups=4):
    f = C + 3
    widths = [f, *head]
    block = sum(a * b + b + 2 * b for a, b in zip(widths[:-1], widths[1:])) + widths[-1] + 1
    gconv = lambda a, b: 2 * a * b + 2 * b  # noqa: E731
    pab = pab_depth * gconv(f, f)
    cw = [f, *cab, 1]
    cabn = sum(gconv(a, b) for a, b in zip(cw[:-1], cw[1:]))
    return {"head": groups * block, "pab": pab, "cab": cabn}


@pytest.mark.parametrize("C", [8, 16])
def test_counts_match_closed_form(C):
    cfg = tiny_model_config(backbone=BackboneConfig(widths=(4, 4, 8, 8), out_channels=C))
    counts = count_params(BoneAgeModel(cfg))
    expect = closed_form(C)
    assert {k: counts[k] for k in expect} == expect
    assert counts["total"] == counts["backbone"] + counts["head"] + counts["pab"] + counts["cab"]
    assert counts["head_plus_dgam"] == counts["head"] + counts["pab"] + counts["cab"]


def test_shared_and_random_grouping_counts():
    cfg = tiny_model_config()
    assert count_params(BoneAgeModel(dataclasses.replace(cfg, grouping="shared")))["head"] == closed_form(8, groups=1)["head"]
    assert count_params(BoneAgeModel(dataclasses.replace(cfg, grouping="rgconv")))["head"] == closed_form(8)["head"]


# -- checkpoints --------------------------------------------------------------------------

@pytest.fixture(scope="module")
def trained(tiny_synth):
    model = BoneAgeModel(tiny_model_config())
    train(model, fresh(tiny_synth[:16]), TrainConfig(epochs=1, batch_size=8, milestones=()))
    return model


def test_checkpoint_round_trip(tmp_path, trained, tiny_synth):
    path = tmp_path / "ckpt"
    save_checkpoint(path, trained)
    loaded = load_checkpoint(path)
    before, after = evaluate(trained, tiny_synth[16:]), evaluate(loaded, tiny_synth[16:])
    assert before.mad == after.mad
    assert [r.to_dict() for r in before.records] == [r.to_dict() for r in after.records]
    assert checkpoint_bytes(loaded) == path.read_bytes()
    assert not list(tmp_path.glob("*.tmp"))


def test_checkpoint_schema_mismatch(tmp_path, trained):
    path = tmp_path / "ckpt"
    save_checkpoint(path, trained)
    doc = default_schema_document()
    doc["g1_edges"] = doc["g1_edges"][:-1]
    with pytest.raises(CheckpointError, match="schema"):
        load_checkpoint(path, schema=load_roi_schema(doc))
    load_checkpoint(path, schema=load_roi_schema())
