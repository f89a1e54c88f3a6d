import numpy as np
import pytest
import torch

from crtseg.cross_reference import global_pool
from crtseg.encoder import FeatureMap
from crtseg.errors import EmptyClassMask, ValidationError
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
from oracles import class_prototype_oracle, local_prototypes_oracle, predict_oracle


def _fmap(arr):
    return FeatureMap(torch.from_numpy(np.asarray(arr, dtype=np.float64)), stride=1)


def _proto(vec, class_id, kind="global", origin=None):
    return Prototype(
        vector=torch.tensor(vec, dtype=torch.float64),
        class_id=class_id,
        kind=kind,
        origin=origin,
    )


class TestLocalPrototypes:
    def test_constant_map_constant_prototypes(self):
        fmap = _fmap(np.full((3, 4, 4), 7.0))
        mask = np.ones((4, 4), dtype=np.int32)
        protos = local_prototypes(fmap, mask, ALPConfig(window=(2, 2)))
        assert len(protos) == 4
        for p in protos:
            np.testing.assert_allclose(p.vector.numpy(), 7.0)
            assert p.kind == "local" and p.class_id == 1

    def test_quadrant_means_1_to_16(self):
        values = np.arange(1.0, 17.0).reshape(1, 4, 4)
        protos = local_prototypes(_fmap(values), np.ones((4, 4), dtype=np.int32), ALPConfig(window=(2, 2)))
        got = sorted(p.vector.item() for p in protos)
        assert got == [3.5, 5.5, 11.5, 13.5]

    def test_full_window_equals_global_pool(self):
        rng = np.random.default_rng(1)
        arr = rng.normal(size=(5, 4, 4))
        protos = local_prototypes(_fmap(arr), np.ones((4, 4), dtype=np.int32), ALPConfig(window=(4, 4)))
        assert len(protos) == 1
        np.testing.assert_allclose(
            protos[0].vector.numpy(), global_pool(torch.from_numpy(arr)).numpy(), atol=1e-12
        )

    def test_threshold_gates_windows(self):
        mask = np.zeros((4, 4), dtype=np.int32)
        mask[:2, :2] = 1
        mask[0, 2] = 1  # second window at fraction 0.25
        arr = np.random.default_rng(2).normal(size=(3, 4, 4))
        protos = local_prototypes(_fmap(arr), mask, ALPConfig(window=(2, 2), fg_threshold=0.95))
        assert [p.origin for p in protos] == [(0, 0)]

    def test_remainder_windows_dropped(self):
        arr = np.random.default_rng(3).normal(size=(2, 5, 5))
        protos = local_prototypes(_fmap(arr), np.ones((5, 5), dtype=np.int32), ALPConfig(window=(2, 2)))
        assert len(protos) == 4  # 2x2 grid; row/col 4 dropped

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(4)
        for _ in range(5):
            arr = rng.normal(size=(3, 6, 6))
            mask = rng.integers(0, 2, size=(6, 6)).astype(np.int32)
            cfg = ALPConfig(window=(2, 2), fg_threshold=0.5)
            got = local_prototypes(_fmap(arr), mask, cfg)
            want = local_prototypes_oracle(arr, mask, (2, 2), 0.5)
            assert [p.origin for p in got] == [o for o, _ in want]
            for p, (_, vec) in zip(got, want):
                np.testing.assert_allclose(p.vector.numpy(), vec, atol=1e-9)

    def test_window_larger_than_grid_rejected(self):
        with pytest.raises(ValidationError):
            local_prototypes(
                _fmap(np.zeros((2, 3, 3))), np.ones((3, 3), dtype=np.int32), ALPConfig(window=(4, 4))
            )


class TestClassPrototype:
    def test_full_mask_is_global_mean(self):
        rng = np.random.default_rng(5)
        arr = rng.normal(size=(4, 3, 3))
        p = class_prototype(_fmap(arr), np.ones((3, 3), dtype=np.int32), 1)
        np.testing.assert_allclose(p.vector.numpy(), arr.mean(axis=(1, 2)), atol=1e-12)
        assert p.kind == "global"

    def test_single_pixel_mask_picks_feature(self):
        rng = np.random.default_rng(6)
        arr = rng.normal(size=(4, 3, 3))
        mask = np.zeros((3, 3), dtype=np.int32)
        mask[1, 2] = 1
        p = class_prototype(_fmap(arr), mask, 1)
        np.testing.assert_allclose(p.vector.numpy(), arr[:, 1, 2], atol=1e-12)

    def test_matches_sum_loop_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(5):
            arr = rng.normal(size=(3, 4, 5))
            mask = rng.integers(0, 2, size=(4, 5)).astype(np.int32)
            if mask.sum() == 0:
                mask[0, 0] = 1
            p = class_prototype(_fmap(arr), mask, 0)
            np.testing.assert_allclose(p.vector.numpy(), class_prototype_oracle(arr, mask), atol=1e-9)

    def test_empty_mask_raises(self):
        with pytest.raises(EmptyClassMask):
            class_prototype(_fmap(np.zeros((2, 3, 3))), np.zeros((3, 3), dtype=np.int32), 1)


class TestAssemble:
    def test_tiny_foreground_yields_single_fg_global(self):
        rng = np.random.default_rng(8)
        arr = rng.normal(size=(3, 4, 4))
        mask = np.zeros((4, 4), dtype=np.int32)
        mask[0, 0] = 1  # below any window threshold at tau=0.95
        protos = assemble_prototype_set(_fmap(arr), mask, ALPConfig(window=(2, 2)))
        fg = [p for p in protos.prototypes if p.class_id == 1]
        assert len(fg) == 1 and fg[0].kind == "global"

    def test_full_foreground_rejected(self):
        arr = np.zeros((2, 4, 4))
        with pytest.raises(EmptyClassMask):
            assemble_prototype_set(_fmap(arr), np.ones((4, 4), dtype=np.int32), ALPConfig(window=(2, 2)))

    def test_checkerboard_gives_two_globals_only(self):
        rng = np.random.default_rng(9)
        arr = rng.normal(size=(3, 4, 4))
        mask = np.indices((4, 4)).sum(axis=0) % 2
        protos = assemble_prototype_set(
            _fmap(arr), mask.astype(np.int32), ALPConfig(window=(2, 2), fg_threshold=0.95)
        )
        kinds = [(p.class_id, p.kind) for p in protos.prototypes]
        assert kinds == [(0, "global"), (1, "global")]

    def test_both_classes_present(self):
        rng = np.random.default_rng(10)
        arr = rng.normal(size=(3, 8, 8))
        mask = np.zeros((8, 8), dtype=np.int32)
        mask[:4] = 1
        protos = assemble_prototype_set(_fmap(arr), mask, ALPConfig(window=(2, 2)))
        ids = {p.class_id for p in protos.prototypes}
        assert ids == {0, 1}
        # fully-foreground and fully-background windows emit locals
        assert any(p.kind == "local" and p.class_id == 1 for p in protos.prototypes)
        assert any(p.kind == "local" and p.class_id == 0 for p in protos.prototypes)

    def test_missing_class_rejected_by_set(self):
        with pytest.raises(ValidationError):
            PrototypeSet(prototypes=[_proto([1.0, 0.0], 1)], classes=(0, 1))


class TestSimilarity:
    def test_identical_vector_scores_alpha(self):
        vec = [0.5, -1.0, 2.0]
        fmap = _fmap(np.array(vec).reshape(3, 1, 1))
        protos = PrototypeSet(prototypes=[_proto([0.0, 0.1, 0.0], 0), _proto(vec, 1)])
        smaps = similarity_maps(protos, fmap, alpha=20.0)
        assert smaps.per_prototype[1, 0, 0].item() == pytest.approx(20.0, abs=1e-9)

    def test_orthogonal_scores_zero(self):
        fmap = _fmap(np.array([1.0, 0.0]).reshape(2, 1, 1))
        protos = PrototypeSet(prototypes=[_proto([0.0, 1.0], 0), _proto([0.0, -1.0], 1)])
        smaps = similarity_maps(protos, fmap, alpha=20.0)
        assert smaps.per_prototype[0, 0, 0].item() == pytest.approx(0.0, abs=1e-12)

    def test_antiparallel_scores_minus_alpha(self):
        fmap = _fmap(np.array([1.0, 1.0]).reshape(2, 1, 1))
        protos = PrototypeSet(prototypes=[_proto([-1.0, -1.0], 0), _proto([1.0, 0.0], 1)])
        smaps = similarity_maps(protos, fmap, alpha=20.0)
        assert smaps.per_prototype[0, 0, 0].item() == pytest.approx(-20.0, abs=1e-9)

    def test_zero_norm_guard(self):
        fmap = _fmap(np.zeros((2, 2, 2)))
        protos = PrototypeSet(prototypes=[_proto([0.0, 0.0], 0), _proto([1.0, 1.0], 1)])
        smaps = similarity_maps(protos, fmap, alpha=20.0)
        assert (smaps.per_prototype == 0).all()

    def test_scores_bounded_by_alpha(self):
        rng = np.random.default_rng(11)
        fmap = _fmap(rng.normal(size=(4, 5, 5)) * 100)
        protos = PrototypeSet(
            prototypes=[_proto(rng.normal(size=4) * 50, c) for c in (0, 1)]
        )
        smaps = similarity_maps(protos, fmap, alpha=20.0)
        assert smaps.per_prototype.abs().max().item() <= 20.0 + 1e-9

    def test_dim_mismatch_rejected(self):
        fmap = _fmap(np.zeros((3, 2, 2)))
        protos = PrototypeSet(prototypes=[_proto([1.0, 0.0], 0), _proto([0.0, 1.0], 1)])
        with pytest.raises(ValidationError):
            similarity_maps(protos, fmap, alpha=20.0)


def test_score_map_debug_export(tmp_path):
    from crtseg.data import read_raster
    from crtseg.prototypes import export_score_maps

    rng = np.random.default_rng(20)
    fmap = _fmap(rng.normal(size=(3, 4, 4)))
    protos = PrototypeSet(
        prototypes=[_proto(rng.normal(size=3), c) for c in (0, 1, 1)]
    )
    smaps = similarity_maps(protos, fmap, alpha=20.0)
    written = export_score_maps(smaps, tmp_path)
    assert len(written) == 3 + 2  # per-prototype + fused per class
    back = read_raster(tmp_path / "prototype_000.bin")
    np.testing.assert_allclose(back, smaps.per_prototype[0].numpy(), atol=1e-6)


class TestPredict:
    def test_softmax_of_zero_twenty(self):
        protos = PrototypeSet(prototypes=[_proto([1.0, 0.0], 0), _proto([0.0, 1.0], 1)])
        fmap = _fmap(np.array([0.0, 1.0]).reshape(2, 1, 1))  # bg cos 0, fg cos 1
        smaps = similarity_maps(protos, fmap, alpha=20.0)
        pred = predict(smaps, (1, 1))
        p_bg = pred.probs[0, 0, 0].item()
        assert p_bg == pytest.approx(2.0611536e-9, rel=1e-3)
        assert pred.label_map[0, 0] == 1

    def test_exact_tie_goes_background(self):
        protos = PrototypeSet(prototypes=[_proto([1.0, 0.0], 0), _proto([1.0, 0.0], 1)])
        fmap = _fmap(np.array([1.0, 0.0]).reshape(2, 1, 1))
        smaps = similarity_maps(protos, fmap, alpha=20.0)
        pred = predict(smaps, (1, 1))
        np.testing.assert_allclose(pred.probs[:, 0, 0].numpy(), [0.5, 0.5])
        assert pred.label_map[0, 0] == 0

    def test_equal_scores_fuse_to_same_value(self):
        # three identical fg prototypes: softmax weights sum to 1, fused = raw
        vec = [1.0, 1.0]
        protos = PrototypeSet(
            prototypes=[_proto([-1.0, -1.0], 0)] + [_proto(vec, 1)] * 3
        )
        fmap = _fmap(np.array([2.0, 2.0]).reshape(2, 1, 1))
        smaps = similarity_maps(protos, fmap, alpha=2.0)
        assert smaps.fused[1, 0, 0].item() == pytest.approx(2.0, abs=1e-9)

    def test_single_prototype_fusion_is_identity(self):
        rng = np.random.default_rng(12)
        fmap = _fmap(rng.normal(size=(3, 4, 4)))
        protos = PrototypeSet(
            prototypes=[_proto(rng.normal(size=3), 0), _proto(rng.normal(size=3), 1)]
        )
        smaps = similarity_maps(protos, fmap, alpha=20.0)
        assert torch.equal(smaps.fused[0], smaps.per_prototype[0])
        assert torch.equal(smaps.fused[1], smaps.per_prototype[1])

    def test_probs_sum_to_one(self):
        rng = np.random.default_rng(13)
        fmap = _fmap(rng.normal(size=(4, 6, 6)))
        protos = PrototypeSet(
            prototypes=[_proto(rng.normal(size=4), c) for c in (0, 0, 1, 1, 1)]
        )
        smaps = similarity_maps(protos, fmap, alpha=20.0)
        pred = predict(smaps, (12, 12))
        np.testing.assert_allclose(pred.probs.sum(dim=0).numpy(), 1.0, atol=1e-6)
        np.testing.assert_allclose(pred.full_probs.sum(dim=0).numpy(), 1.0, atol=1e-6)

    def test_scale_invariance_of_query(self):
        rng = np.random.default_rng(14)
        arr = rng.normal(size=(4, 5, 5))
        protos = PrototypeSet(
            prototypes=[_proto(rng.normal(size=4), c) for c in (0, 1, 1)]
        )
        a = similarity_maps(protos, _fmap(arr), alpha=20.0)
        b = similarity_maps(protos, _fmap(arr * 37.5), alpha=20.0)
        assert torch.allclose(a.per_prototype, b.per_prototype, atol=1e-6)
        la = predict(a, (10, 10)).label_map
        lb = predict(b, (10, 10)).label_map
        np.testing.assert_array_equal(la, lb)

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(15)
        for _ in range(3):
            arr = rng.normal(size=(3, 8, 8))
            vecs = [rng.normal(size=3) for _ in range(6)]
            class_ids = [0, 0, 0, 1, 1, 1]
            protos = PrototypeSet(
                prototypes=[_proto(v, c) for v, c in zip(vecs, class_ids)]
            )
            smaps = similarity_maps(protos, _fmap(arr), alpha=20.0)
            pred = predict(smaps, (8, 8))
            fused_o, probs_o = predict_oracle(vecs, class_ids, arr, 20.0)
            np.testing.assert_allclose(smaps.fused.numpy(), fused_o, atol=1e-6)
            np.testing.assert_allclose(pred.probs.numpy(), probs_o, atol=1e-6)
