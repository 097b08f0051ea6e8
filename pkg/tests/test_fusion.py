import numpy as np
import pytest
import torch

from mamlseg.backbone import zero_init_
from mamlseg.core import Mask, MultiModalCase, Volume
from mamlseg.fusion import (
    AttentionBranch,
    DualConv,
    FusionConfig,
    JointHead,
    ModalityAwareFusion,
    canonical_order,
    export_attention,
    weighted_aggregate,
)
from mamlseg.io import load_array

from oracles import aggregate_loop, sampled_gradient_error


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)


def feats(c=32, s=8, dtype=torch.float32, mods=("AP", "VP")):
    return {m: torch.randn(1, c, s, s, s, dtype=dtype) for m in mods}


class TestDual:
    def test_shape(self):
        dual = DualConv(["VP", "AP"], 32)
        assert dual(feats()).shape == (1, 32, 8, 8, 8)

    def test_canonical_order(self):
        assert DualConv(["VP", "AP"], 4).modalities == ("AP", "VP")
        assert canonical_order(["b", "a", "c"]) == ("a", "b", "c")

    def test_zero_features_zero_bias(self):
        dual = DualConv(["AP", "VP"], 4)
        torch.nn.init.zeros_(dual.conv.bias)
        out = dual({m: torch.zeros(1, 4, 4, 4, 4) for m in ("AP", "VP")})
        assert torch.all(out == 0)

    def test_errors(self):
        with pytest.raises(ValueError):
            DualConv(["AP"], 4)
        dual = DualConv(["AP", "VP"], 4)
        with pytest.raises(ValueError):
            dual({"AP": torch.zeros(1, 4, 4, 4, 4), "VP": torch.zeros(1, 4, 4, 4, 2)})
        with pytest.raises(ValueError):
            dual({"AP": torch.zeros(1, 4, 4, 4, 4)})

    def test_gradient(self):
        dual = DualConv(["AP", "VP"], 3, kernel=3).double()
        f = feats(3, 4, torch.float64)
        w = torch.randn(1, 3, 4, 4, 4, dtype=torch.float64)
        errors = sampled_gradient_error(lambda: (dual(f) * w).sum(), dual.named_parameters())
        assert max(errors.values()) <= 1e-4, errors


class TestAttention:
    def test_range(self):
        branch = AttentionBranch(8, 4)
        for scale in (0.1, 1.0, 10.0):
            a = branch(torch.randn(2, 8, 4, 4, 4) * scale, torch.randn(2, 8, 4, 4, 4) * scale)
            assert a.shape == (2, 1, 4, 4, 4)
            assert a.min() > 0 and a.max() < 1

    def test_zero_init_gives_half(self):
        branch = zero_init_(AttentionBranch(8, 4))
        a = branch(torch.zeros(1, 8, 4, 4, 4), torch.zeros(1, 8, 4, 4, 4))
        assert torch.all(a == 0.5)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            AttentionBranch(4, 2)(torch.zeros(1, 4, 4, 4, 4), torch.zeros(1, 4, 4, 4, 2))

    def test_gradient(self):
        branch = AttentionBranch(4, 2).double()
        d, f = torch.randn(1, 4, 4, 4, 4, dtype=torch.float64), torch.randn(1, 4, 4, 4, 4, dtype=torch.float64)
        errors = sampled_gradient_error(lambda: branch(d, f).sum(), branch.named_parameters())
        assert max(errors.values()) <= 1e-4, errors

    def test_separate_parameters_per_modality(self):
        fusion = ModalityAwareFusion(["AP", "VP"], 4)
        pa = set(map(id, fusion.attention["AP"].parameters()))
        pv = set(map(id, fusion.attention["VP"].parameters()))
        assert not pa & pv


class TestAggregate:
    def test_limits(self):
        f = feats(4, 2)
        one = torch.full((1, 1, 2, 2, 2), 1 - 1e-7)
        zero = torch.full((1, 1, 2, 2, 2), 1e-7)
        out = weighted_aggregate([(one, f["AP"]), (zero, f["VP"])])
        torch.testing.assert_close(out, f["AP"], atol=1e-5, rtol=0)

    def test_half_is_mean(self):
        f = feats(4, 2)
        half = torch.full((1, 1, 2, 2, 2), 0.5)
        out = weighted_aggregate([(half, f["AP"]), (half, f["VP"])])
        torch.testing.assert_close(out, (f["AP"] + f["VP"]) / 2)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(0)
        pairs = [(rng.random((1, 2, 2, 2)), rng.normal(size=(2, 2, 2, 2))) for _ in range(2)]
        expected = aggregate_loop(pairs)
        got = weighted_aggregate([(torch.from_numpy(a), torch.from_numpy(f)) for a, f in pairs]).numpy()
        np.testing.assert_array_equal(got, expected)

    def test_permutation_invariant_and_bounded(self):
        f = feats(3, 4, mods=("A", "B", "C"))
        atts = [torch.rand(1, 1, 4, 4, 4) for _ in f]
        pairs = list(zip(atts, f.values()))
        out = weighted_aggregate(pairs)
        torch.testing.assert_close(weighted_aggregate(pairs[::-1]), out)
        bound = sum(v.abs() for v in f.values())
        assert torch.all(out.abs() <= bound)

    def test_errors(self):
        with pytest.raises(ValueError):
            weighted_aggregate([])
        with pytest.raises(ValueError):
            weighted_aggregate([(torch.rand(1, 1, 2, 2, 2), torch.rand(1, 3, 2, 2, 2)),
                                (torch.rand(1, 1, 2, 2, 2), torch.rand(1, 3, 2, 2, 4))])
        with pytest.raises(ValueError):
            weighted_aggregate([(torch.rand(1, 2, 2, 2, 2), torch.rand(1, 3, 2, 2, 2))])


class TestModule:
    def test_forward(self):
        fusion = ModalityAwareFusion(["AP", "VP"], 8, FusionConfig())
        fused, maps = fusion(feats(8, 4))
        assert fused.shape == (1, 8, 4, 4, 4)
        assert set(maps) == {"AP", "VP"} and maps["AP"].shape == (1, 1, 4, 4, 4)

    def test_default_hidden_width(self):
        fusion = ModalityAwareFusion(["AP", "VP"], 32)
        conv = fusion.attention["AP"].block1.conv
        assert (conv.in_channels, conv.out_channels, conv.kernel_size) == (64, 16, (3, 3, 3))
        conv2 = fusion.attention["AP"].block2.conv
        assert (conv2.in_channels, conv2.out_channels, conv2.kernel_size) == (16, 1, (1, 1, 1))

    def test_joint_head(self):
        head = JointHead(8)
        p = head(torch.randn(1, 8, 4, 4, 4))
        torch.testing.assert_close(p.sum(1), torch.ones(1, 4, 4, 4))
        assert torch.all(zero_init_(JointHead(8))(torch.zeros(1, 8, 2, 2, 2)) == 0.5)
        with pytest.raises(ValueError):
            head(torch.randn(1, 4, 2, 2, 2))


class TestExport:
    @pytest.mark.parametrize("suffix", [".raw", ".nii.gz"])
    def test_round_trip(self, tmp_path, suffix):
        case = MultiModalCase({"AP": Volume(np.zeros((4, 6, 8)), (0.5, 1.0, 2.0))}, Mask(np.zeros((4, 6, 8))))
        att = torch.sigmoid(torch.randn(1, 4, 6, 8))
        path = export_attention(att, case, tmp_path / f"att_AP{suffix}")
        data, spacing, _ = load_array(path)
        assert np.array_equal(data, att.numpy()[0].astype(np.float32))
        assert spacing == (0.5, 1.0, 2.0)
        assert data.min() > 0 and data.max() < 1

    def test_grid_mismatch(self, tmp_path):
        case = MultiModalCase({"AP": Volume(np.zeros((4, 4, 4)))}, Mask(np.zeros((4, 4, 4))))
        with pytest.raises(ValueError):
            export_attention(torch.rand(1, 4, 4, 2), case, tmp_path / "a.raw")
