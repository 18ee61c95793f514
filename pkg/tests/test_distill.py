import csv

import numpy as np
import pytest
import torch

from bgvae.config import TrainConfig, toy_arch
from bgvae.data import make_toy_dataset
from bgvae.distill import (
    EmaTracker,
    TapAdapters,
    affinity,
    loss_feature,
    loss_rs,
    loss_total,
    rd_loss,
    sample_lambda,
    train,
)
from bgvae.exceptions import ConfigError, DimensionError
from bgvae.model import BgVae, CodecOutput, load_checkpoint
from conftest import max_rel_grad_err


class TestAffinity:
    def test_orthogonal_pixels_give_identity(self):
        # Two pixels with channel vectors (1, 0) and (0, 1).
        f = torch.tensor([[[[1.0, 0.0]], [[0.0, 1.0]]]])  # (1, 2, 1, 2)
        a = affinity(f)
        assert torch.allclose(a[0], torch.eye(2), atol=1e-6)

    def test_identical_directions_give_ones(self):
        v = torch.tensor([0.3, -1.2, 0.5])
        f = v[None, :, None, None].expand(1, 3, 4, 4)
        a = affinity(f)
        assert (a - 1).abs().max().item() <= 1e-6

    def test_symmetric_psd_unit_diagonal(self):
        torch.manual_seed(0)
        f = torch.randn(2, 16, 8, 8, dtype=torch.float64)
        a = affinity(f)
        assert (a - a.transpose(1, 2)).abs().max().item() <= 1e-5
        diag = torch.diagonal(a, dim1=1, dim2=2)
        assert (diag - 1).abs().max().item() <= 1e-4
        for b in range(a.shape[0]):
            eig = np.linalg.eigvalsh(a[b].numpy())
            assert eig.min() >= -1e-4

    def test_entries_bounded(self):
        f = torch.randn(1, 4, 6, 6)
        a = affinity(f)
        assert a.min().item() >= -1 - 1e-5
        assert a.max().item() <= 1 + 1e-5

    def test_per_pixel_rescaling_invariance(self):
        torch.manual_seed(1)
        f = torch.randn(1, 8, 6, 6, dtype=torch.float64)
        scale = torch.rand(1, 1, 6, 6, dtype=torch.float64) * 5 + 0.5
        assert (affinity(f * scale) - affinity(f)).abs().max().item() <= 1e-5


class TestLossFeature:
    def test_identity_zero(self):
        a = affinity(torch.randn(1, 4, 4, 4))
        assert loss_feature(a, a).item() == pytest.approx(0.0, abs=1e-6)

    def test_negated_matrix(self):
        a = affinity(torch.randn(1, 4, 4, 4, dtype=torch.float64))
        got = loss_feature(a, -a).item()
        want = 2 * a.abs().mean().item() + 2.0
        assert got == pytest.approx(want, abs=1e-9)

    def test_cosine_term_bounded(self):
        torch.manual_seed(2)
        for _ in range(20):
            a = torch.randn(1, 10, 10)
            b = torch.randn(1, 10, 10)
            l1 = (a - b).abs().mean()
            cos_term = loss_feature(a, b) - l1
            assert -1e-6 <= cos_term.item() <= 2 + 1e-6

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            loss_feature(torch.zeros(1, 4, 4), torch.zeros(1, 5, 5))


class TestLossRs:
    def test_identity_zero(self):
        x = torch.rand(1, 3, 8, 8)
        assert loss_rs(x, x).item() == 0.0

    def test_constant_offset(self):
        x = torch.rand(1, 3, 8, 8)
        assert loss_rs(x, x + 0.1).item() == pytest.approx(0.1, abs=1e-6)

    def test_non_negative(self):
        for _ in range(10):
            v = loss_rs(torch.randn(1, 3, 4, 4), torch.randn(1, 3, 4, 4)).item()
            assert v >= 0

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            loss_rs(torch.zeros(1, 3, 4, 4), torch.zeros(1, 3, 4, 5))


def _fake_output(features: dict, recon: torch.Tensor, rate: float = 100.0) -> CodecOutput:
    return CodecOutput(recon, [], torch.tensor(rate, dtype=recon.dtype), features)


class TestLossTotal:
    def test_matching_teacher_reduces_to_rd_loss(self):
        # Fresh adapters are identity maps, so equal taps and reconstructions
        # make every guidance term vanish.
        torch.manual_seed(0)
        x = torch.rand(1, 3, 32, 32)
        recon = torch.rand(1, 3, 32, 32)
        feats = {f"F{i}": torch.randn(1, 8, 4, 4) for i in range(1, 9)}
        student = _fake_output(dict(feats), recon)
        teacher = _fake_output({k: v.clone() for k, v in feats.items()}, recon.clone())
        arch = toy_arch()
        adapters = TapAdapters(arch.__class__(**{**arch.to_dict(), "stage_widths": (8, 8, 8, 8)}))
        e = torch.randn(arch.d_lambda)
        report = loss_total(student, teacher, x, 512.0, adapters=adapters, embedding=e)
        assert report.total.item() == pytest.approx(report.l_lambda.item(), abs=1e-5)
        assert report.l_rs.item() == 0.0

    def test_report_composition(self):
        x = torch.rand(1, 3, 32, 32)
        student = _fake_output({f"F{i}": torch.randn(1, 4, 4, 4) for i in range(1, 9)},
                               torch.rand(1, 3, 32, 32))
        teacher = _fake_output({f"F{i}": torch.randn(1, 4, 4, 4) for i in range(1, 9)},
                               torch.rand(1, 3, 32, 32))
        report = loss_total(student, teacher, x, 512.0)
        want = report.l_lambda + 1.0 * sum(report.l_feature) + 1.0 * report.l_rs
        assert report.total.item() == pytest.approx(want.item(), rel=1e-6)
        assert report.lambda_used == 512.0

    def test_out_of_range_lambda_warns(self):
        x = torch.rand(1, 3, 32, 32)
        out = _fake_output({}, torch.rand(1, 3, 32, 32))
        with pytest.warns(UserWarning):
            loss_total(out, None, x, 10.0)

    def test_unguided_is_rd_loss_only(self):
        x = torch.rand(1, 3, 32, 32)
        out = _fake_output({}, torch.rand(1, 3, 32, 32))
        report = loss_total(out, None, x, 512.0)
        assert report.total.item() == report.l_lambda.item()
        assert report.l_feature == ()
        assert report.l_lambda.item() == pytest.approx(rd_loss(out, x, 512.0).item())

    def test_gradient_wrt_student_tap(self):
        torch.manual_seed(4)
        x = torch.rand(1, 3, 8, 8, dtype=torch.float64)
        recon = torch.rand(1, 3, 8, 8, dtype=torch.float64)
        teacher = _fake_output(
            {"F1": torch.randn(1, 8, 4, 4, dtype=torch.float64)}, recon.clone()
        )

        def fn(tap):
            student = _fake_output({"F1": tap}, recon)
            return loss_total(student, teacher, x, 512.0, taps=("F1",)).total

        tap = torch.randn(1, 8, 4, 4, dtype=torch.float64)
        assert max_rel_grad_err(fn, [tap]) <= 1e-3


class TestSampleLambda:
    def test_range(self):
        rng = np.random.default_rng(0)
        draws = [sample_lambda(rng) for _ in range(100_000)]
        assert min(draws) >= 64 and max(draws) <= 8192

    def test_median_matches_log_uniform(self):
        rng = np.random.default_rng(1)
        draws = [sample_lambda(rng) for _ in range(100_000)]
        med = float(np.median(draws))
        assert 700 <= med <= 740  # log-uniform median = sqrt(64 * 8192) = 724.1

    def test_deterministic_under_seed(self):
        a = [sample_lambda(np.random.default_rng(9)) for _ in range(10)]
        b = [sample_lambda(np.random.default_rng(9)) for _ in range(10)]
        assert a == b


class TestAdaptersAndEma:
    def test_adapters_identity_at_init(self):
        arch = toy_arch()
        adapters = TapAdapters(arch)
        f = torch.randn(1, arch.stage_widths[3], 4, 4)
        e = torch.randn(arch.d_lambda)
        assert torch.equal(adapters("F1", f, e), f)

    def test_ema_lags_raw_weights(self):
        torch.manual_seed(0)
        model = BgVae(toy_arch())
        ema = EmaTracker(model, 0.999)
        opt = torch.optim.Adam(model.parameters(), lr=1e-3)
        x = torch.rand(1, 3, 64, 64)
        for _ in range(2):
            out = model.forward_train(x, 512.0)
            loss = rd_loss(out, x, 512.0)
            opt.zero_grad()
            loss.backward()
            opt.step()
            ema.update(model)
        shadow = ema.state_dict()
        diffs = [
            (shadow[name] - param).abs().max().item()
            for name, param in model.named_parameters()
        ]
        assert max(diffs) > 0


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("toyset")
    make_toy_dataset(root, count=8, size=64, seed=0)
    return root


def _tiny_config(dataset, **overrides):
    base = dict(
        dataset=str(dataset),
        iterations=3,
        batch_size=2,
        crop_size=64,
        lambda_mode="fixed",
        lambda_value=512.0,
        arch="toy",
        seed=1,
    )
    base.update(overrides)
    return TrainConfig.from_dict(base)


class TestTrainLoop:
    def test_smoke_and_metrics_csv(self, tiny_dataset, tmp_path):
        result = train(_tiny_config(tiny_dataset), out_dir=tmp_path)
        with open(result["metrics"]) as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 3
        assert set(rows[0]) == {
            "step", "l_lambda", "l_feature_sum", "l_rs", "total", "lambda", "grad_norm",
        }
        for row in rows:
            assert float(row["grad_norm"]) <= 2.0 + 1e-6
            assert float(row["lambda"]) == 512.0
        model, payload = load_checkpoint(result["checkpoint"])
        assert payload["ema_state_dict"] is not None
        assert model.variant == "student"

    def test_guidance_requires_teacher(self, tiny_dataset, tmp_path):
        with pytest.raises(ConfigError):
            train(_tiny_config(tiny_dataset, guidance=True), out_dir=tmp_path)

    def test_guided_run_with_teacher(self, tiny_dataset, tmp_path):
        teacher_res = train(
            _tiny_config(tiny_dataset, variant="teacher"), out_dir=tmp_path / "teacher"
        )
        result = train(
            _tiny_config(tiny_dataset, guidance=True),
            teacher_ckpt=teacher_res["checkpoint"],
            out_dir=tmp_path / "student",
        )
        with open(result["metrics"]) as fh:
            rows = list(csv.DictReader(fh))
        assert all(float(r["l_feature_sum"]) > 0 for r in rows)
        assert all(float(r["l_rs"]) > 0 for r in rows)

    def test_student_checkpoint_rejected_as_teacher(self, tiny_dataset, tmp_path):
        student_res = train(_tiny_config(tiny_dataset), out_dir=tmp_path / "s")
        with pytest.raises(ConfigError):
            train(
                _tiny_config(tiny_dataset, guidance=True),
                teacher_ckpt=student_res["checkpoint"],
                out_dir=tmp_path / "g",
            )

    def test_teacher_frozen_during_guided_training(self, tiny_dataset, tmp_path):
        teacher_res = train(
            _tiny_config(tiny_dataset, variant="teacher"), out_dir=tmp_path / "teacher"
        )
        before = torch.load(teacher_res["checkpoint"], weights_only=True)
        train(
            _tiny_config(tiny_dataset, guidance=True),
            teacher_ckpt=teacher_res["checkpoint"],
            out_dir=tmp_path / "student",
        )
        after = torch.load(teacher_res["checkpoint"], weights_only=True)
        for key, tensor in before["ema_state_dict"].items():
            assert torch.equal(tensor, after["ema_state_dict"][key])

    def test_sampled_lambda_mode(self, tiny_dataset, tmp_path):
        result = train(
            _tiny_config(tiny_dataset, lambda_mode="sampled"), out_dir=tmp_path
        )
        with open(result["metrics"]) as fh:
            lams = [float(r["lambda"]) for r in csv.DictReader(fh)]
        assert all(64 <= v <= 8192 for v in lams)
        assert len(set(lams)) > 1

    def test_mse_feature_loss_mode(self, tiny_dataset, tmp_path):
        teacher_res = train(
            _tiny_config(tiny_dataset, variant="teacher"), out_dir=tmp_path / "teacher"
        )
        result = train(
            _tiny_config(tiny_dataset, guidance=True, feature_loss="mse"),
            teacher_ckpt=teacher_res["checkpoint"],
            out_dir=tmp_path / "student",
        )
        with open(result["metrics"]) as fh:
            rows = list(csv.DictReader(fh))
        assert all(float(r["l_feature_sum"]) >= 0 for r in rows)
