import math

import numpy as np
import pytest
import torch

from segens import organs
from segens.checkpoint import IntegrityError, save_checkpoint
from segens.ensembles import (
    ArgmaxEnsemble,
    Branches,
    ConfigurationError,
    EnsembleSpec,
    LayerFusionEnsemble,
    LogitStack,
    LogitsConvEnsemble,
    MetaModelEnsemble,
    MultiLabelPrediction,
    Strategy,
    build_ensemble,
    fuse_argmax,
    load_ensemble_checkpoint,
    predict_volume,
    save_ensemble_checkpoint,
    stack_branch_logits,
)
from segens.models import build_model


def make_branch_files(tmp_path, jobs, width=0.125, seed_base=50):
    """Write untrained branch checkpoints; jobs = [(organ, backbone)]."""
    paths = []
    for i, (organ, backbone) in enumerate(jobs):
        out_channels = 7 if organ == "multiclass" else 1
        window = None if organ == "multiclass" else organs.ORGAN_WINDOWS[organ]
        model = build_model(
            backbone, out_channels=out_channels, width=width,
            organ=organ, window=window, seed=seed_base + i,
        )
        path = tmp_path / f"branch_{i}.ckpt"
        save_checkpoint(model, path, training={"best_val_loss": 0.1 * (i + 1)})
        paths.append(str(path))
    return paths


SIX_ORGANS = [(o, "unet") for o in range(1, 7)]


def logits_for_probs(probs):
    p = np.clip(np.asarray(probs, np.float64), 1e-9, 1 - 1e-9)
    return np.log(p / (1 - p)).astype(np.float32)


def reference_argmax(stack: LogitStack, threshold: float, class_count: int) -> np.ndarray:
    """Independent per-pixel reference for the argmax fusion rule."""
    n, h, w = stack.values.shape
    out = np.zeros((h, w), np.uint8)
    for y in range(h):
        for x in range(w):
            best_class, best_prob = 0, -1.0
            for c in range(1, class_count + 1):
                prob = -1.0
                for row in range(n):
                    if stack.branch_meta[row][0] == c:
                        p = 1.0 / (1.0 + math.exp(-float(stack.values[row, y, x])))
                        prob = max(prob, p)
                if prob > best_prob:  # strictly greater: ties stay with lower class
                    best_class, best_prob = c, prob
            out[y, x] = best_class if best_prob >= threshold else 0
    return out


class TestFuseArgmax:
    def meta(self, organs_per_row):
        return tuple((o, "unet", f"digest{i}") for i, o in enumerate(organs_per_row))

    def test_clear_argmax(self):
        probs = np.array([0.9, 0.2, 0.7, 0.1, 0.1, 0.1]).reshape(6, 1, 1)
        stack = LogitStack(values=logits_for_probs(probs), branch_meta=self.meta(range(1, 7)))
        assert fuse_argmax(stack, 0.5)[0, 0] == 1

    def test_all_below_threshold_is_background(self):
        probs = np.full((6, 1, 1), 0.3)
        stack = LogitStack(values=logits_for_probs(probs), branch_meta=self.meta(range(1, 7)))
        assert fuse_argmax(stack, 0.5)[0, 0] == 0

    def test_matches_reference_on_125_point_grid(self):
        levels = [0.0, 0.25, 0.5, 0.75, 1.0]
        combos = [(a, b, c) for a in levels for b in levels for c in levels]
        probs = np.array(combos, np.float64).T.reshape(3, 5, 25)
        stack = LogitStack(values=logits_for_probs(probs), branch_meta=self.meta([1, 2, 3]))
        fast = fuse_argmax(stack, 0.5, class_count=3)
        slow = reference_argmax(stack, 0.5, class_count=3)
        np.testing.assert_array_equal(fast, slow)

    def test_redundant_branches_take_class_max(self):
        # two branches for class 1: 0.2 and 0.9 -> class prob 0.9 beats class 2's 0.6
        probs = np.array([0.2, 0.9, 0.6]).reshape(3, 1, 1)
        stack = LogitStack(values=logits_for_probs(probs), branch_meta=self.meta([1, 1, 2]))
        assert fuse_argmax(stack, 0.5, class_count=2)[0, 0] == 1

    def test_tie_breaks_to_lowest_class(self):
        probs = np.array([0.8, 0.8, 0.6]).reshape(3, 1, 1)
        stack = LogitStack(values=logits_for_probs(probs), branch_meta=self.meta([1, 2, 3]))
        assert fuse_argmax(stack, 0.5, class_count=3)[0, 0] == 1

    def test_monotone_transform_invariance(self, rng):
        values = rng.normal(size=(3, 6, 6)).astype(np.float32)
        stack = LogitStack(values=values, branch_meta=self.meta([1, 2, 3]))
        transformed = LogitStack(values=(2.0 * values + 1.0), branch_meta=self.meta([1, 2, 3]))
        a = fuse_argmax(stack, 0.5, 3)
        b = fuse_argmax(transformed, 0.5, 3)
        both_fg = (a > 0) & (b > 0)
        np.testing.assert_array_equal(a[both_fg], b[both_fg])

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            LogitStack(values=np.array([[[np.inf]]], np.float32), branch_meta=self.meta([1]))


class TestBranchesAndStack:
    def test_stack_shape_six_branches(self, tmp_path, tiny_phantoms):
        paths = make_branch_files(tmp_path, SIX_ORGANS)
        branches = Branches.load(paths, class_count=6)
        _, patients = tiny_phantoms
        volume, _ = patients[0]
        stack = stack_branch_logits(branches, volume.voxels[2], crop=160)
        assert stack.values.shape == (6, 160, 160)
        assert [m[0] for m in stack.branch_meta] == list(range(1, 7))

    def test_exp2_pool_stacks_eight(self, tmp_path, tiny_phantoms):
        jobs = SIX_ORGANS + [(organs.ESOPHAGUS, "deeplabv3"), (organs.TRACHEA, "unet")]
        paths = make_branch_files(tmp_path, jobs)
        branches = Branches.load(paths, class_count=6)
        _, patients = tiny_phantoms
        volume, _ = patients[0]
        stack = stack_branch_logits(branches, volume.voxels[2], crop=160)
        assert stack.values.shape == (8, 160, 160)

    def test_multiclass_branch_contributes_class_channels(self, tmp_path, tiny_phantoms):
        jobs = SIX_ORGANS + [("multiclass", "deeplabv3")]
        paths = make_branch_files(tmp_path, jobs)
        branches = Branches.load(paths, class_count=6)
        _, patients = tiny_phantoms
        volume, _ = patients[0]
        stack = stack_branch_logits(branches, volume.voxels[2], crop=96)
        assert stack.values.shape == (12, 96, 96)  # 6 binaries + 6 class rows
        assert [m[0] for m in stack.branch_meta] == list(range(1, 7)) + list(range(1, 7))

    def test_deterministic_across_calls(self, tmp_path, tiny_phantoms):
        paths = make_branch_files(tmp_path, SIX_ORGANS[:3] + [(o, "unet") for o in (4, 5, 6)])
        branches = Branches.load(paths, class_count=6)
        _, patients = tiny_phantoms
        volume, _ = patients[0]
        s1 = stack_branch_logits(branches, volume.voxels[1], crop=96)
        s2 = stack_branch_logits(branches, volume.voxels[1], crop=96)
        np.testing.assert_array_equal(s1.values, s2.values)

    def test_missing_checkpoint_is_configuration_error(self, tmp_path):
        with pytest.raises(ConfigurationError):
            Branches.load([tmp_path / "missing.ckpt"], class_count=1)

    def test_uncovered_organ_rejected(self, tmp_path):
        paths = make_branch_files(tmp_path, [(1, "unet"), (2, "unet")])
        with pytest.raises(ConfigurationError):
            Branches.load(paths, class_count=3)


class TestLogitsConv:
    def test_identity_selection_reproduces_branch_thresholds(self, tmp_path, rng):
        paths = make_branch_files(tmp_path, [(1, "unet"), (2, "unet"), (3, "deeplabv3")])
        branches = Branches.load(paths, class_count=3)
        ens = LogitsConvEnsemble(branches, class_count=3, init="identity")
        stacked = torch.from_numpy(rng.normal(size=(2, 3, 16, 16)).astype(np.float32))
        fused = ens(stacked)
        per_branch = (torch.sigmoid(stacked) >= 0.5).numpy()
        via_head = (torch.sigmoid(fused) >= 0.5).numpy()
        np.testing.assert_array_equal(via_head, per_branch)

    def test_identity_with_redundant_branches_uses_first(self, tmp_path, rng):
        paths = make_branch_files(tmp_path, [(1, "unet"), (1, "deeplabv3"), (2, "unet")])
        branches = Branches.load(paths, class_count=2)
        ens = LogitsConvEnsemble(branches, class_count=2, init="identity")
        w, b = ens.class_weights()
        np.testing.assert_array_equal(w, [[1, 0, 0], [0, 0, 1]])
        np.testing.assert_array_equal(b, [0, 0])

    def test_random_weight_pixel_is_affine_combination(self, tmp_path, rng):
        paths = make_branch_files(tmp_path, [(1, "unet"), (2, "unet")])
        branches = Branches.load(paths, class_count=2)
        ens = LogitsConvEnsemble(branches, class_count=2, init="random")
        w, b = ens.class_weights()
        x = rng.normal(size=(1, 2, 1, 1)).astype(np.float32)
        fused = ens(torch.from_numpy(x)).detach().numpy()[0, :, 0, 0]
        expected = w @ x[0, :, 0, 0] + b
        np.testing.assert_allclose(fused, expected, rtol=1e-5, atol=1e-6)

    def test_channel_mismatch_rejected(self, tmp_path):
        paths = make_branch_files(tmp_path, [(1, "unet"), (2, "unet")])
        branches = Branches.load(paths, class_count=2)
        ens = LogitsConvEnsemble(branches, class_count=2)
        with pytest.raises(ConfigurationError):
            ens(torch.zeros(1, 5, 8, 8))

    def test_permutation_equivariance(self, tmp_path, rng):
        paths = make_branch_files(tmp_path, [(1, "unet"), (2, "unet"), (3, "unet")])
        branches = Branches.load(paths, class_count=3)
        ens = LogitsConvEnsemble(branches, class_count=3, init="random")
        stacked = torch.from_numpy(rng.normal(size=(1, 3, 8, 8)).astype(np.float32))
        out = ens(stacked).detach()
        perm = [2, 0, 1]
        with torch.no_grad():
            permuted = LogitsConvEnsemble(branches, class_count=3, init="random")
            permuted.fusion.weight.copy_(ens.fusion.weight[:, perm])
            permuted.fusion.bias.copy_(ens.fusion.bias)
        out_perm = permuted(stacked[:, perm]).detach()
        torch.testing.assert_close(out, out_perm, rtol=0, atol=1e-6)


class TestMetaModel:
    def test_untrained_prediction_shape_and_values(self, tmp_path, tiny_phantoms):
        paths = make_branch_files(tmp_path, SIX_ORGANS)
        branches = Branches.load(paths, class_count=6)
        ens = MetaModelEnsemble(branches, class_count=6, seed=1)
        _, patients = tiny_phantoms
        volume, _ = patients[0]
        pred = ens.predict_slice(volume.voxels[1], crop=96)
        assert pred.binary.shape == (6, 96, 96)
        assert set(np.unique(pred.binary)) <= {0, 1}

    def test_channel_mismatch_rejected(self, tmp_path):
        paths = make_branch_files(tmp_path, [(1, "unet")])
        branches = Branches.load(paths, class_count=1)
        ens = MetaModelEnsemble(branches, class_count=1, seed=0)
        with pytest.raises(ConfigurationError):
            ens(torch.zeros(1, 4, 16, 16))


class TestLayerFusion:
    def test_fused_channel_arithmetic(self, tmp_path):
        jobs = [(1, "se_resunet"), (2, "se_resunet"), (4, "se_resunet"), (6, "se_resunet"),
                (3, "deeplabv3"), (5, "deeplabv3")]
        paths = make_branch_files(tmp_path, jobs)
        branches = Branches.load(paths, class_count=6)
        ens = LayerFusionEnsemble(branches, class_count=6)
        assert ens.fusion.in_channels == 4 * 64 + 2 * 256 == 768

    def test_zero_features_give_bias(self, tmp_path):
        paths = make_branch_files(tmp_path, [(1, "unet"), (2, "unet")])
        branches = Branches.load(paths, class_count=2)
        ens = LayerFusionEnsemble(branches, class_count=2, init="random")
        with torch.no_grad():
            out = ens.fusion(torch.zeros(1, 128, 4, 4))[0, :, 0, 0]
        torch.testing.assert_close(out, ens.fusion.bias.detach())

    def test_identity_init_matches_branch_logits(self, tmp_path, tiny_phantoms):
        paths = make_branch_files(tmp_path, [(1, "unet"), (2, "deeplabv3")])
        branches = Branches.load(paths, class_count=2)
        ens = LayerFusionEnsemble(branches, class_count=2, init="identity")
        _, patients = tiny_phantoms
        volume, _ = patients[0]
        raw = volume.voxels[2][16:112, 16:112].astype(np.float32)[None]
        inputs = branches.branch_inputs(raw)
        with torch.no_grad():
            fused = ens(inputs).numpy()
            direct = np.stack(
                [branches.pool[i](inputs[:, i : i + 1]).numpy()[:, 0] for i in range(2)], axis=1
            )
        # equal up to gemm accumulation order (the fused dot spans extra
        # zero-weight channels), not bitwise
        np.testing.assert_allclose(fused, direct, rtol=1e-4, atol=1e-5)

    def test_feature_heads_trainable_rest_frozen(self, tmp_path):
        paths = make_branch_files(tmp_path, [(1, "unet"), (2, "unet")])
        branches = Branches.load(paths, class_count=2)
        ens = LayerFusionEnsemble(branches, class_count=2)
        trainable = {id(p) for p in ens.trainable_parameters()}
        for model in ens.branches.pool:
            for p in model.feature_head.parameters():
                assert id(p) in trainable
            for p in model.encoders.parameters():
                assert id(p) not in trainable
        assert all(id(p) in trainable for p in ens.fusion.parameters())


class TestMultiLabelPrediction:
    def test_exclusive_overlap_resolution(self):
        binary = np.zeros((2, 1, 2), np.uint8)
        probs = np.zeros((2, 1, 2), np.float32)
        binary[:, 0, 0] = 1  # both classes fire at pixel 0
        probs[0, 0, 0] = 0.7
        probs[1, 0, 0] = 0.9  # class 2 more confident
        labels = MultiLabelPrediction(binary=binary, probs=probs).exclusive()
        assert labels[0, 0] == 2
        assert labels[0, 1] == 0

    def test_exclusive_without_probs_uses_lowest_class(self):
        binary = np.ones((2, 1, 1), np.uint8)
        labels = MultiLabelPrediction(binary=binary).exclusive()
        assert labels[0, 0] == 1


class TestPredictVolume:
    def test_argmax_volume_shapes_and_background(self, tmp_path, tiny_phantoms):
        paths = make_branch_files(tmp_path, SIX_ORGANS)
        spec = EnsembleSpec(strategy=Strategy.ARGMAX, branches=tuple(paths), class_count=6)
        ens = build_ensemble(spec)
        _, patients = tiny_phantoms
        volume, mask = patients[0]
        pred = predict_volume(ens, volume, crop=96, batch_size=4)
        assert pred.binary.shape == (6, volume.shape[0], 96, 96)
        labels = pred.exclusive()
        assert labels.shape == (volume.shape[0], 96, 96)

    def test_trained_head_volume_shape(self, tmp_path, tiny_phantoms):
        paths = make_branch_files(tmp_path, SIX_ORGANS)
        spec = EnsembleSpec(strategy=Strategy.LOGITS_CONV, branches=tuple(paths), class_count=6)
        ens = build_ensemble(spec, seed=0)
        _, patients = tiny_phantoms
        volume, _ = patients[0]
        pred = predict_volume(ens, volume, crop=96, batch_size=4)
        assert pred.binary.shape == (6, volume.shape[0], 96, 96)
        assert np.isfinite(pred.probs).all()


class TestSpecAndCheckpoint:
    def test_spec_json_round_trip(self, tmp_path):
        spec = EnsembleSpec(
            strategy=Strategy.LAYER_FUSION,
            branches=("a.ckpt", "b.ckpt"),
            class_count=6,
            threshold=0.4,
            includes_multiclass_branch=True,
        )
        spec.save(tmp_path / "spec.json")
        assert EnsembleSpec.load(tmp_path / "spec.json") == spec

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            EnsembleSpec(strategy=Strategy.ARGMAX, branches=(), class_count=6)
        with pytest.raises(ValueError):
            EnsembleSpec(strategy=Strategy.ARGMAX, branches=("x",), class_count=6, threshold=1.5)

    def test_ensemble_checkpoint_round_trip(self, tmp_path, rng):
        paths = make_branch_files(tmp_path, [(1, "unet"), (2, "unet")])
        spec = EnsembleSpec(strategy=Strategy.LOGITS_CONV, branches=tuple(paths), class_count=2)
        ens = build_ensemble(spec, seed=4)
        with torch.no_grad():
            ens.fusion.weight.add_(0.25)
        save_ensemble_checkpoint(ens, spec, tmp_path / "ens.ckpt", training={"epochs": 1})
        restored, restored_spec, training = load_ensemble_checkpoint(tmp_path / "ens.ckpt")
        assert restored_spec == spec and training == {"epochs": 1}
        torch.testing.assert_close(restored.fusion.weight, ens.fusion.weight)

    def test_layer_fusion_checkpoint_restores_feature_heads(self, tmp_path):
        paths = make_branch_files(tmp_path, [(1, "unet"), (2, "unet")])
        spec = EnsembleSpec(strategy=Strategy.LAYER_FUSION, branches=tuple(paths), class_count=2)
        ens = build_ensemble(spec, seed=4)
        with torch.no_grad():
            for p in ens.branches.pool[0].feature_head.parameters():
                p.add_(0.5)
        save_ensemble_checkpoint(ens, spec, tmp_path / "lf.ckpt")
        restored, _, _ = load_ensemble_checkpoint(tmp_path / "lf.ckpt")
        for pa, pb in zip(
            restored.branches.pool[0].feature_head.parameters(),
            ens.branches.pool[0].feature_head.parameters(),
        ):
            torch.testing.assert_close(pa, pb)

    def test_changed_branch_file_fails_load(self, tmp_path):
        paths = make_branch_files(tmp_path, [(1, "unet")])
        spec = EnsembleSpec(strategy=Strategy.LOGITS_CONV, branches=tuple(paths), class_count=1)
        ens = build_ensemble(spec, seed=0)
        save_ensemble_checkpoint(ens, spec, tmp_path / "e.ckpt")
        # retrain/overwrite the branch checkpoint
        model = build_model("unet", organ=1, window=organs.ORGAN_WINDOWS[1], width=0.125, seed=999)
        save_checkpoint(model, paths[0])
        with pytest.raises(IntegrityError):
            load_ensemble_checkpoint(tmp_path / "e.ckpt")
