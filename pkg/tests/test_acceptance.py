"""Acceptance suite: one test per release criterion, each printing PASS/FAIL.

Run with `pytest tests/test_acceptance.py -v -s` to see the per-criterion
lines. The end-to-end training check (criterion 5) is the slow one; it is
marked `slow` but runs by default.
"""

import json
import time

import numpy as np
import pytest
import torch

from crtseg.cross_reference import (
    AttentionConfig,
    CrossReferenceBlock,
    GateBlock,
    cross_attention,
    global_pool,
)
from crtseg.data import MaskMap, SyntheticSpec, make_synthetic_dataset
from crtseg.encoder import FeatureMap
from crtseg.episodes import SuperpixelConfig, build_episode
from crtseg.errors import EmptyClassMask, NoEligibleSegment
from crtseg.losses import dice, seg_loss
from crtseg.prototypes import (
    ALPConfig,
    Prototype,
    PrototypeSet,
    assemble_prototype_set,
    class_prototype,
    local_prototypes,
    predict,
    similarity_maps,
)
from crtseg.training import (
    GRADCHECK_COMPONENTS,
    TrainConfig,
    build_model,
    evaluate,
    finite_difference_check,
    forward_episode,
    learning_rate,
    run_ablation,
    train,
)
from oracles import (
    attention_oracle,
    class_prototype_oracle,
    gate_oracle,
    global_pool_oracle,
    local_prototypes_oracle,
    predict_oracle,
    seg_loss_oracle,
)


def _report(number, name, passed, detail=""):
    status = "PASS" if passed else "FAIL"
    print(f"\nACCEPTANCE {number} ({name}): {status} {detail}".rstrip())
    assert passed, f"criterion {number} ({name}) failed: {detail}"


# --------------------------------------------------------------------------
# Criterion 1: oracle equivalence on >= 20 seeded small instances, < 1e-6
# --------------------------------------------------------------------------


def test_criterion_1_oracle_equivalence():
    start = time.time()
    worst = 0.0

    for seed in range(20):
        rng = np.random.default_rng(1000 + seed)

        # cross_attention
        q, k, v = (rng.normal(size=(4, 8)), rng.normal(size=(6, 8)), rng.normal(size=(6, 8)))
        got = cross_attention(torch.from_numpy(q), torch.from_numpy(k), torch.from_numpy(v)).numpy()
        worst = max(worst, np.abs(got - attention_oracle(q, k, v)).max())

        # fc_gate
        gate = GateBlock(8, reduction=4).double()
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            for p in gate.parameters():
                torch.nn.init.normal_(p)
        vec = rng.normal(size=8)
        got = gate(torch.from_numpy(vec)).detach().numpy()
        want = gate_oracle(
            vec,
            gate.fc1.weight.detach().numpy(), gate.fc1.bias.detach().numpy(),
            gate.fc2.weight.detach().numpy(), gate.fc2.bias.detach().numpy(),
        )
        worst = max(worst, np.abs(got - want).max())

        # global_pool
        fmap = rng.normal(size=(5, 4, 6))
        worst = max(worst, np.abs(global_pool(torch.from_numpy(fmap)).numpy() - global_pool_oracle(fmap)).max())

        # local_prototypes + class_prototype
        feats = rng.normal(size=(3, 6, 6))
        mask = rng.integers(0, 2, size=(6, 6)).astype(np.int32)
        if mask.sum() in (0, 36):
            mask[0, 0] = 1 - mask[0, 0]
        cfg = ALPConfig(window=(2, 2), fg_threshold=0.5)
        got_locals = local_prototypes(FeatureMap(torch.from_numpy(feats), stride=1), mask, cfg)
        want_locals = local_prototypes_oracle(feats, mask, (2, 2), 0.5)
        assert [p.origin for p in got_locals] == [o for o, _ in want_locals]
        for p, (_, vec) in zip(got_locals, want_locals):
            worst = max(worst, np.abs(p.vector.numpy() - vec).max())
        got_cls = class_prototype(FeatureMap(torch.from_numpy(feats), stride=1), mask, 1)
        worst = max(worst, np.abs(got_cls.vector.numpy() - class_prototype_oracle(feats, mask)).max())

        # predict (fused maps + class probabilities)
        f_q = rng.normal(size=(3, 5, 5))
        vecs = [rng.normal(size=3) for _ in range(5)]
        class_ids = [0, 0, 1, 1, 1]
        protos = PrototypeSet(
            prototypes=[
                Prototype(vector=torch.from_numpy(v), class_id=c, kind="global")
                for v, c in zip(vecs, class_ids)
            ]
        )
        smaps = similarity_maps(protos, FeatureMap(torch.from_numpy(f_q), stride=1), 20.0)
        pred = predict(smaps, (5, 5))
        fused_want, probs_want = predict_oracle(vecs, class_ids, f_q, 20.0)
        worst = max(worst, np.abs(smaps.fused.numpy() - fused_want).max())
        worst = max(worst, np.abs(pred.probs.numpy() - probs_want).max())

        # seg_loss
        probs = torch.softmax(torch.from_numpy(rng.normal(size=(2, 4, 4)) * 3), dim=0)
        target = rng.integers(0, 2, size=(4, 4)).astype(np.int32)
        got_loss = seg_loss(probs, MaskMap(target)).item()
        worst = max(worst, abs(got_loss - seg_loss_oracle(probs.numpy(), target)))

    elapsed = time.time() - start
    _report(1, "oracle equivalence", worst < 1e-6 and elapsed < 60,
            f"[max err {worst:.2e}, {elapsed:.1f}s]")


# --------------------------------------------------------------------------
# Criterion 2: finite-difference gradient checks < 1e-5, 10 instances each
# --------------------------------------------------------------------------


def test_criterion_2_gradient_correctness():
    start = time.time()
    worst = {}
    for component in GRADCHECK_COMPONENTS:
        worst[component] = max(
            finite_difference_check(component, seed=seed, epsilon=1e-3)
            for seed in range(10)
        )
    elapsed = time.time() - start
    ok = all(v < 1e-5 for v in worst.values()) and elapsed < 300
    detail = ", ".join(f"{k}={v:.2e}" for k, v in worst.items())
    _report(2, "gradient correctness", ok, f"[{detail}, {elapsed:.1f}s]")


# --------------------------------------------------------------------------
# Criterion 3: normalization invariants
# --------------------------------------------------------------------------


def test_criterion_3_normalization_invariants():
    rng = np.random.default_rng(7)
    ok = True
    detail = []

    # attention rows sum to 1 +- 1e-6
    for _ in range(10):
        q = torch.from_numpy(rng.normal(size=(6, 8)) * 4)
        k = torch.from_numpy(rng.normal(size=(9, 8)) * 4)
        v = torch.from_numpy(rng.normal(size=(9, 8)))
        _, w = cross_attention(q, k, v, return_weights=True)
        err = (w.sum(dim=1) - 1).abs().max().item()
        ok &= err <= 1e-6
    detail.append("attention rows")

    # class probabilities sum to 1 +- 1e-6 everywhere; scores within [-20, 20]
    for _ in range(10):
        feats = rng.normal(size=(4, 6, 6)) * 10
        vecs = [rng.normal(size=4) * 5 for _ in range(4)]
        protos = PrototypeSet(
            prototypes=[
                Prototype(vector=torch.from_numpy(v), class_id=c, kind="global")
                for v, c in zip(vecs, (0, 0, 1, 1))
            ]
        )
        smaps = similarity_maps(protos, FeatureMap(torch.from_numpy(feats), stride=1), 20.0)
        pred = predict(smaps, (12, 12))
        ok &= (pred.probs.sum(dim=0) - 1).abs().max().item() <= 1e-6
        ok &= (pred.full_probs.sum(dim=0) - 1).abs().max().item() <= 1e-6
        ok &= smaps.per_prototype.abs().max().item() <= 20.0 + 1e-9
    detail.append("probabilities")

    # gates strictly inside (0, 1)
    block = CrossReferenceBlock(8, AttentionConfig(dim=8, init_seed=1)).double()
    for seed in range(10):
        g = np.random.default_rng(seed)
        f_s = FeatureMap(torch.from_numpy(g.normal(size=(8, 3, 3)) * 5), stride=1)
        f_q = FeatureMap(torch.from_numpy(g.normal(size=(8, 3, 3)) * 5), stride=1)
        mask = MaskMap(np.ones((3, 3), dtype=np.int32))
        w_s, w_q, fused = block.gates(f_s, f_q, mask)
        for w in (w_s, w_q, fused):
            ok &= bool((w > 0).all() and (w < 1).all())
    detail.append("gates")

    _report(3, "normalization invariants", ok, f"[{', '.join(detail)}]")


# --------------------------------------------------------------------------
# Criterion 4: learning-rate schedule exactness
# --------------------------------------------------------------------------


def test_criterion_4_schedule_exactness():
    expected = {0: 0.001, 999: 0.001, 1000: 0.001 * 0.98, 5000: 0.001 * 0.98**5}
    ok = all(learning_rate(t) == v for t, v in expected.items())
    _report(4, "schedule exactness", ok, f"[checked t={sorted(expected)}]")


# --------------------------------------------------------------------------
# Criterion 5: end-to-end synthetic competence (slow)
# --------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_5_end_to_end_dice():
    start = time.time()
    spec = SyntheticSpec(n_slices=48, height=128, width=128, radius_range=(0.14, 0.28))
    train_ds = make_synthetic_dataset(spec, seed=11)
    eval_spec = SyntheticSpec(n_slices=16, height=128, width=128, radius_range=(0.14, 0.28))
    eval_ds = make_synthetic_dataset(eval_spec, seed=1011)

    config = TrainConfig(
        iterations=2000,
        seed=5,
        log_every=200,
        use_support_mask=True,
        use_cross_reference=True,
        superpixels=SuperpixelConfig(min_area=400),
    )
    result = train(config, train_ds)
    report = evaluate(result.model, eval_ds, config.alp, max_episodes=50, sample_seed=5)
    elapsed = time.time() - start
    ok = report.mean_dice is not None and report.mean_dice >= 0.85 and elapsed <= 1200
    per_class = {k: round(v, 3) for k, v in sorted(report.per_class.items())}
    _report(5, "end-to-end synthetic competence", ok,
            f"[mean Dice {report.mean_dice:.4f} over {sum(report.episode_counts.values())} episodes, "
            f"per-class {per_class}, {elapsed:.0f}s]")


# --------------------------------------------------------------------------
# Criterion 6: ablation harness shape and shared episode stream
# --------------------------------------------------------------------------


def test_criterion_6_ablation_harness():
    ds = make_synthetic_dataset(
        SyntheticSpec(n_slices=3, height=64, width=64, radius_range=(0.15, 0.28)), seed=21
    )
    eval_ds = make_synthetic_dataset(
        SyntheticSpec(n_slices=3, height=64, width=64, radius_range=(0.15, 0.28)), seed=99
    )
    config = TrainConfig(
        iterations=6, log_every=3, seed=2,
        superpixels=SuperpixelConfig(min_area=60),
    )
    report = run_ablation(config, ds, eval_ds, max_episodes=4)
    names = [r["name"] for r in report.rows]
    ok = (
        names == ["base", "base+support_mask", "base+mask+transformer"]
        and report.to_tsv().splitlines()[0].split("\t")[-1] == "Mean"
        and report.delta_last_vs_first is not None
    )
    _report(6, "ablation harness", ok,
            f"[rows {names}, delta {report.delta_last_vs_first:+.4f}]")


# --------------------------------------------------------------------------
# Criterion 7: bitwise determinism of loss logs and checkpoints
# --------------------------------------------------------------------------


def test_criterion_7_determinism(tmp_path):
    torch.set_num_threads(1)
    ds = make_synthetic_dataset(
        SyntheticSpec(n_slices=3, height=64, width=64, radius_range=(0.15, 0.28)), seed=21
    )
    config = TrainConfig(
        iterations=8, log_every=1, seed=4, superpixels=SuperpixelConfig(min_area=60)
    )
    a = train(config, ds, out_dir=tmp_path / "a")
    b = train(config, ds, out_dir=tmp_path / "b")
    logs_equal = a.loss_log_path.read_bytes() == b.loss_log_path.read_bytes()
    ckpt_equal = a.checkpoint_path.read_bytes() == b.checkpoint_path.read_bytes()
    _report(7, "determinism", logs_equal and ckpt_equal,
            f"[loss logs {'==' if logs_equal else '!='}, checkpoints {'==' if ckpt_equal else '!='}]")


# --------------------------------------------------------------------------
# Criterion 8: degenerate-input robustness over a 1000-episode fuzz run
# --------------------------------------------------------------------------


def test_criterion_8_degenerate_fuzz():
    from crtseg.data import Image2D, SliceDataset, SliceRecord
    from crtseg.episodes import build_episode
    from crtseg.superpixels import felzenszwalb_segment

    rng = np.random.default_rng(0)
    size = 48
    slices = [
        SliceRecord(Image2D(np.zeros((size, size))), None, "blank"),
        SliceRecord(Image2D(np.full((size, size), 0.7)), None, "flat"),
        SliceRecord(Image2D(rng.uniform(0, 1, (size, size))), None, "noise"),
        SliceRecord(Image2D(rng.uniform(0, 0.05, (size, size))), None, "dim"),
    ]
    ds = make_synthetic_dataset(
        SyntheticSpec(n_slices=2, height=size, width=size, radius_range=(0.15, 0.3)), seed=3
    )
    slices += ds.slices
    dataset = SliceDataset(slices=slices)

    config = TrainConfig(
        iterations=1, seed=0,
        superpixels=SuperpixelConfig(min_area=60, max_area_fraction=0.3),
    )
    model = build_model(config)
    spx_cache = {}
    outcomes = {"stepped": 0, "skipped": 0}
    crashes = []
    for episode_idx in range(1000):
        srng = np.random.default_rng(np.random.SeedSequence([77, episode_idx]))
        slice_idx = int(srng.integers(len(dataset)))
        seed = int(srng.integers(2**62))
        try:
            if slice_idx not in spx_cache:
                rec = dataset[slice_idx]
                spx_cache[slice_idx] = felzenszwalb_segment(
                    rec.image, config.superpixels.k, config.superpixels.min_size,
                    config.superpixels.sigma,
                )
            episode = build_episode(
                dataset[slice_idx].image, config.superpixels, config.transforms,
                seed, spx=spx_cache[slice_idx],
            )
            _, losses = forward_episode(model, episode, config.alp, lam=1.0)
            assert torch.isfinite(losses["total"])
            outcomes["stepped"] += 1
        except (NoEligibleSegment, EmptyClassMask):
            outcomes["skipped"] += 1
        except Exception as exc:  # anything undeclared is a fuzz failure
            crashes.append((episode_idx, type(exc).__name__, str(exc)))
    ok = not crashes and outcomes["skipped"] > 0 and outcomes["stepped"] > 0
    _report(8, "degenerate-input robustness", ok,
            f"[{outcomes}, crashes {crashes[:3]}]")
