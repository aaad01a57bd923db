import csv
import json

import numpy as np
import pytest
import torch
from PIL import Image

from despeckle import service, training
from despeckle.api import schemas
from despeckle.config import dump_config, toy_model_config, TrainConfig
from despeckle.data import read_image
from despeckle.stats import read_flat_array, rho_map


def _toy_overrides(**extra):
    toy = toy_model_config()
    tree = {"max_steps": 2, "batch_size": 4, "anchor_count": 16, "data.synthetic_count": 8,
            "model.embed_dim": toy.embed_dim, "model.image_size": toy.image_size,
            "model.stage_depths": "[1,1,1,1]", "model.heads_per_stage": "[2,2,4,8]",
            "model.stripe_widths": "[2,2,2,1]", "model.decoder_channels": "[64,32,16,16,8]",
            "model.projection_dim": toy.projection_dim, **extra}
    return [f"{k}={v}" for k, v in tree.items()]


def _write_images(root, n=10, shape=(40, 50), seed=0):
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    for i in range(n):
        Image.fromarray(rng.integers(0, 256, shape, dtype=np.uint8)).save(root / f"img{i:02d}.png")
    return root


@pytest.fixture(autouse=True)
def _output_root(monkeypatch, tmp_path):
    # defaulted outputs land in the test's temp dir, never the working tree
    monkeypatch.setenv(service.OUTPUT_ROOT_ENV, str(tmp_path / "default_root"))


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    res = service.train(schemas.TrainRequest(overrides=_toy_overrides(), output_dir=str(out)))
    return res


class TestPrepare:
    def test_three_noisy_sets(self, tmp_path):
        root = _write_images(tmp_path / "raw")
        res = service.prepare(schemas.PrepareRequest(root=str(root), dataset="demo", size=32,
                                                     output_dir=str(tmp_path / "out")))
        assert sorted(res.noisy_dirs) == ["0.25", "0.5", "0.75"]
        assert res.counts == {"train": 7, "test": 3, "total": 10}
        for d in res.noisy_dirs.values():
            files = sorted(p.name for p in (tmp_path / "out" / d.split("/")[-1]).iterdir())
            assert len(files) == 10
            assert read_image(f"{d}/{files[0]}").shape == (32, 32)

    def test_same_seed_same_checksums(self, tmp_path):
        root = _write_images(tmp_path / "raw")
        a = service.prepare(schemas.PrepareRequest(root=str(root), dataset="d", size=32, output_dir=str(tmp_path / "a")))
        b = service.prepare(schemas.PrepareRequest(root=str(root), dataset="d", size=32, output_dir=str(tmp_path / "b")))
        c = service.prepare(schemas.PrepareRequest(root=str(root), dataset="d", size=32, seed=1,
                                                   output_dir=str(tmp_path / "c")))
        assert a.digest == b.digest != c.digest
        for p in (tmp_path / "a").rglob("*.png"):
            assert p.read_bytes() == (tmp_path / "b" / p.relative_to(tmp_path / "a")).read_bytes()

    def test_missing_root(self, tmp_path):
        with pytest.raises(service.StorageError) as err:
            service.prepare(schemas.PrepareRequest(root=str(tmp_path / "nowhere"), dataset="d"))
        assert err.value.exit_code == 3 and "nowhere" in str(err.value)
        assert not (tmp_path / "default_root").exists()

    def test_output_root_env(self, tmp_path, monkeypatch):
        monkeypatch.setenv(service.OUTPUT_ROOT_ENV, str(tmp_path / "root"))
        root = _write_images(tmp_path / "raw", n=4)
        res = service.prepare(schemas.PrepareRequest(root=str(root), dataset="d", size=32, sigmas=[0.5],
                                                     output_dir="rel"))
        assert res.manifest == str(tmp_path / "root" / "rel" / "manifest.csv")


def _rayleigh_oracle_fraction(tau, window=5, n=10**6, seed=123):
    """Fraction of independent Rayleigh windows whose mean / population std falls below tau."""
    w = np.random.default_rng(seed).rayleigh(size=(n, window * window))
    return float(np.mean(w.mean(1) / w.std(1) < tau))


class TestStats:
    def test_constant_image_is_empty(self, tmp_path):
        Image.fromarray(np.full((30, 30), 140, np.uint8)).save(tmp_path / "flat.png")
        res = service.stats(schemas.StatsRequest(image=str(tmp_path / "flat.png"), output_dir=str(tmp_path / "o")))
        assert res.n_below == 0 and res.n_positions == 26 * 26
        assert (tmp_path / "o" / "regions.csv").read_text().splitlines() == ["i,j,rho"]

    def test_rayleigh_fraction_matches_oracle(self, tmp_path):
        x = np.random.default_rng(7).rayleigh(size=(512, 512))
        Image.fromarray(np.round(x / x.max() * 65535).astype(np.uint16)).save(tmp_path / "ray.png")
        res = service.stats(schemas.StatsRequest(image=str(tmp_path / "ray.png"), output_dir=str(tmp_path / "o")))
        assert res.n_below > 0
        assert abs(res.fraction_below - _rayleigh_oracle_fraction(1.92)) <= 0.02
        with (tmp_path / "o" / "regions.csv").open() as fh:
            assert sum(1 for _ in csv.DictReader(fh)) == res.n_below

    def test_flat_array_roundtrip(self, tmp_path):
        x = np.random.default_rng(1).rayleigh(size=(20, 24))
        Image.fromarray(np.round(x / x.max() * 65535).astype(np.uint16)).save(tmp_path / "ray.png")
        res = service.stats(schemas.StatsRequest(image=str(tmp_path / "ray.png"), output_dir=str(tmp_path / "o")))
        back = read_flat_array(res.rho_array)
        want = rho_map(torch.from_numpy(read_image(tmp_path / "ray.png"))[None], 5).numpy()
        np.testing.assert_array_equal(back[0], want)
        assert Image.open(res.heatmap).size == (24, 20)

    def test_tau_override_beats_config(self, tmp_path):
        x = np.random.default_rng(2).rayleigh(size=(64, 64))
        Image.fromarray(np.round(x / x.max() * 65535).astype(np.uint16)).save(tmp_path / "ray.png")
        cfg_path = tmp_path / "cfg.yaml"
        cfg_path.write_text(dump_config(TrainConfig(tau_noise=1.0)))
        from_file = service.stats(schemas.StatsRequest(image=str(tmp_path / "ray.png"), config_path=str(cfg_path)))
        override = service.stats(schemas.StatsRequest(image=str(tmp_path / "ray.png"), config_path=str(cfg_path),
                                                      tau=3.0))
        assert (from_file.tau, override.tau) == (1.0, 3.0)
        assert from_file.n_below < override.n_below

    def test_missing_image(self, tmp_path):
        with pytest.raises(service.StorageError):
            service.stats(schemas.StatsRequest(image=str(tmp_path / "none.png")))

    def test_bad_window(self, tmp_path):
        Image.fromarray(np.full((30, 30), 140, np.uint8)).save(tmp_path / "flat.png")
        with pytest.raises(service.UserError):
            service.stats(schemas.StatsRequest(image=str(tmp_path / "flat.png"), window=4))


class TestTrainEval:
    def test_outputs(self, trained):
        assert trained.steps == 2
        assert [r.sigma for r in trained.evaluation] == [0.25, 0.5, 0.75]
        with open(trained.log) as fh:
            assert len(list(csv.DictReader(fh))) == 1

    def test_eval_matches_training_report(self, trained, tmp_path):
        res = service.evaluate_checkpoint(schemas.EvalRequest(checkpoint=trained.checkpoint,
                                                              output_dir=str(tmp_path)))
        assert res.rows == trained.evaluation

    def test_resume_extends(self, trained, tmp_path):
        res = service.train(schemas.TrainRequest(overrides=_toy_overrides(max_steps=4), resume=trained.checkpoint,
                                                 output_dir=str(tmp_path)))
        assert res.steps == 4

    def test_bad_override(self):
        with pytest.raises(service.UserError):
            service.train(schemas.TrainRequest(overrides=["model.nonsense=3"]))

    def test_missing_config_file(self, tmp_path):
        with pytest.raises(service.UserError):
            service.train(schemas.TrainRequest(config_path=str(tmp_path / "absent.yaml")))

    def test_divergence_exit_code(self, tmp_path, monkeypatch):
        real = training.compute_losses

        def poisoned(*args, **kwargs):
            terms = real(*args, **kwargs)
            terms.total = terms.total * float("nan")
            return terms

        monkeypatch.setattr(training, "compute_losses", poisoned)
        with pytest.raises(service.DivergenceError) as err:
            service.train(schemas.TrainRequest(overrides=_toy_overrides(), output_dir=str(tmp_path)))
        assert err.value.exit_code == 4


class TestTables:
    def test_sweep(self, tmp_path):
        res = service.sweep(schemas.SweepRequest(axis="depths", values=[[1, 1, 1, 1], [1, 2, 1, 1]],
                                                 overrides=_toy_overrides(), output_dir=str(tmp_path)))
        assert [r["depths"] for r in res.rows] == ["1, 1, 1, 1", "1, 2, 1, 1"]


class TestFigure:
    @pytest.fixture(scope="class")
    @classmethod
    def ckpt224(cls, tmp_path_factory):
        out = tmp_path_factory.mktemp("run224")
        overrides = _toy_overrides(**{"model.image_size": 224, "max_steps": 1, "batch_size": 1,
                                      "data.synthetic_count": 4, "data.eval_sigmas": "[0.5]"})
        return service.train(schemas.TrainRequest(overrides=overrides, output_dir=str(out))).checkpoint

    def test_layout_and_captions(self, ckpt224, tmp_path):
        res = service.figure(schemas.FigureRequest(checkpoint=ckpt224, output=str(tmp_path / "f.png")))
        assert (res.width, Image.open(res.image).size[0]) == (3 * 224, 3 * 224)
        assert res.height == 224 + service.CAPTION_HEIGHT
        assert json.loads((tmp_path / "f.json").read_text())[0]["id"] == res.captions[0].id

    def test_caption_matches_evaluate(self, ckpt224, tmp_path):
        from despeckle.checkpoint import load_checkpoint
        from despeckle.harness import datasets_from_config

        res = service.figure(schemas.FigureRequest(checkpoint=ckpt224, output=str(tmp_path / "f.png")))
        ck = load_checkpoint(ckpt224)
        _, test_set = datasets_from_config(ck.train_config)
        report = training.evaluate(training.ModelDenoiser(ck.build_model()), test_set, [0.5], seed=ck.train_config.seed,
                                   batch_size=ck.train_config.batch_size, keep_samples=True)
        per_sample = {s.id: s.metrics for s in report.samples}
        cap = res.captions[0]
        assert cap.psnr == per_sample[cap.id].psnr and cap.ssim == per_sample[cap.id].ssim

    def test_byte_identical(self, ckpt224, tmp_path):
        a = service.figure(schemas.FigureRequest(checkpoint=ckpt224, output=str(tmp_path / "a.png")))
        b = service.figure(schemas.FigureRequest(checkpoint=ckpt224, output=str(tmp_path / "b.png")))
        assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()
        assert a.captions == b.captions

    def test_unknown_sample(self, ckpt224):
        with pytest.raises(service.UserError):
            service.figure(schemas.FigureRequest(checkpoint=ckpt224, samples=["nope"]))

    def test_missing_checkpoint(self, tmp_path):
        with pytest.raises(service.UserError) as err:
            service.figure(schemas.FigureRequest(checkpoint=str(tmp_path / "gone")))
        assert err.value.exit_code == 2
