import numpy as np
import pytest

from radiart.embedding import FeatureExtractor, ToyEncoder
from radiart.errors import DivergenceError, ValidationError
from radiart.field import FieldArch, init_params
from radiart.geometry import (MultiViewDataset, ring_cameras,
                              soft_sphere_scene, synthetic_dataset)
from radiart.losses import StyleTask
from radiart.renderer import RenderConfig
from radiart.trainer import (Stage1Config, Stage2Config, TrainConfig,
                             deferred_style_step, monolithic_style_grad,
                             psnr, sample_patches, stylize,
                             train_reconstruction)

ARCH = FieldArch(pe_levels_pos=4, pe_levels_dir=1, hidden_width=32, depth=2)


def tiny_scene_dataset(n_cams=3, px=16):
    scene = soft_sphere_scene()
    cams = ring_cameras(n_cams, width=px, height_px=px,
                        focal=px * 1.1, radius=2.6)
    return synthetic_dataset(scene, cams, step=0.02), scene


def tiny_config(**kw):
    defaults = dict(
        stage1=Stage1Config(epochs=2, lr=5e-3, rays_per_batch=128),
        stage2=Stage2Config(epochs=1, lr=1e-3, tile_size=6),
        render=RenderConfig(samples_per_ray=12, near=1.0, far=4.2),
        seed=0,
    )
    defaults.update(kw)
    return TrainConfig(**defaults)


def style_fixtures(px=16):
    dataset, _ = tiny_scene_dataset(n_cams=2, px=px)
    provider = ToyEncoder(seed=1)
    extractor = FeatureExtractor(seed=1, levels=2, base_channels=4)
    task = StyleTask(t_tgt="carved obsidian idol",
                     negatives=("chalk sketch", "neon sign", "paper lantern"),
                     patch_fraction=0.45, patches_per_view=2,
                     negatives_per_step=3)
    return dataset, provider, extractor, task


class TestSamplePatches:
    def test_paper_sizing(self):
        rects = sample_patches(256, 256, 1.0 / 10.0, 5, seed=0)
        assert all(r[2] == 25 and r[3] == 25 for r in rects)

    def test_zero_patches(self):
        assert sample_patches(64, 64, 0.5, 0, seed=0) == []

    def test_all_inside_bounds(self):
        rects = sample_patches(100, 60, 0.3, 50, seed=1)
        side = 18
        for x0, y0, w, h in rects:
            assert w == side and h == side
            assert 0 <= x0 <= 100 - side
            assert 0 <= y0 <= 60 - side

    def test_deterministic(self):
        assert sample_patches(64, 64, 0.25, 8, seed=9) == \
            sample_patches(64, 64, 0.25, 8, seed=9)

    def test_too_small_rejected(self):
        with pytest.raises(ValidationError):
            sample_patches(20, 20, 0.1, 1, seed=0)


class TestConfigs:
    def test_stage_invariants(self):
        with pytest.raises(ValidationError):
            Stage1Config(epochs=0)
        with pytest.raises(ValidationError):
            Stage2Config(lr=0.0)
        with pytest.raises(ValidationError):
            TrainConfig(precision="float16")

    def test_defaults_match_declared_constants(self):
        cfg = TrainConfig()
        assert cfg.stage1.epochs == 6 and cfg.stage1.lr == 5e-4
        assert cfg.stage2.epochs == 4 and cfg.stage2.lr == 1e-3
        assert cfg.render.samples_per_ray == 192


class TestReconstruction:
    def test_solid_color_dataset_high_psnr(self):
        # degenerate scene: every view is one flat color
        cams = ring_cameras(8, width=12, height_px=12, focal=14.0)
        color = np.array([0.24, 0.55, 0.8])
        frames = [(np.broadcast_to(color, (12, 12, 3)).copy(), c) for c in cams]
        dataset = MultiViewDataset(frames=frames, near=1.0, far=4.0)
        config = tiny_config(stage1=Stage1Config(
            epochs=60, lr=1e-2, lr_decay=0.05, rays_per_batch=288,
            density_bias_init=1.5, holdout=(7,)))
        params, report = train_reconstruction(dataset, ARCH, config)
        assert params.role == "reconstructed"
        assert report.epochs[-1]["psnr_holdout"] > 40

    def test_deterministic_given_seed(self):
        dataset, _ = tiny_scene_dataset()
        config = tiny_config()
        p1, r1 = train_reconstruction(dataset, ARCH, config)
        p2, r2 = train_reconstruction(dataset, ARCH, config)
        for a, b in zip(p1.tensors, p2.tensors):
            np.testing.assert_array_equal(a, b)
        assert [s["loss"] for s in r1.steps] == [s["loss"] for s in r2.steps]

    def test_loss_decreases(self):
        dataset, _ = tiny_scene_dataset()
        config = tiny_config(stage1=Stage1Config(epochs=6, lr=5e-3,
                                                 rays_per_batch=192))
        _, report = train_reconstruction(dataset, ARCH, config)
        losses = [s["loss"] for s in report.steps]
        assert np.mean(losses[-4:]) < 0.5 * np.mean(losses[:4])

    def test_holdout_cannot_swallow_all_frames(self):
        dataset, _ = tiny_scene_dataset(n_cams=2)
        config = tiny_config(stage1=Stage1Config(holdout=(0, 1)))
        with pytest.raises(ValidationError):
            train_reconstruction(dataset, ARCH, config)

    def test_divergent_lr_aborts(self):
        # bounded activations keep merely-large rates stable, so genuine
        # divergence needs an lr big enough to overflow the matmuls
        dataset, _ = tiny_scene_dataset(n_cams=2)
        config = tiny_config(stage1=Stage1Config(epochs=30, lr=1e200,
                                                 rays_per_batch=128))
        with np.errstate(all="ignore"), pytest.raises(DivergenceError):
            train_reconstruction(dataset, ARCH, config)

    def test_report_jsonl_roundtrip(self, tmp_path):
        import json
        dataset, _ = tiny_scene_dataset(n_cams=2)
        _, report = train_reconstruction(dataset, ARCH, tiny_config())
        report.write_jsonl(tmp_path / "r.jsonl")
        lines = [json.loads(l) for l in (tmp_path / "r.jsonl").read_text().splitlines()]
        assert lines[0]["type"] == "meta"
        assert sum(1 for l in lines if l["type"] == "step") == len(report.steps)


class TestDeferredExactness:
    """Tiled gradient must equal the one-shot full-graph gradient."""

    def _grads(self, task, tile_size, seed=11):
        dataset, provider, extractor, _ = style_fixtures(px=16)
        config = tiny_config(stage2=Stage2Config(epochs=1, lr=1e-3,
                                                 tile_size=tile_size))
        params = init_params(ARCH, seed=3)
        _, cam = dataset.frames[0]
        i_src = dataset.frames[0][0]
        negatives = list(task.negatives)[:2] or None
        deferred, bd_d = deferred_style_step(
            params, ARCH, cam, task, provider, extractor, config, i_src,
            step_seed=seed, negatives=negatives)
        monolithic, bd_m = monolithic_style_grad(
            params, ARCH, cam, task, provider, extractor, config, i_src,
            step_seed=seed, negatives=negatives)
        return deferred, monolithic, bd_d, bd_m

    @staticmethod
    def _max_rel(a, b):
        worst = 0.0
        for ga, gb in zip(a, b):
            denom = np.maximum(np.abs(gb), 1e-12)
            worst = max(worst, float(np.max(np.abs(ga - gb) / denom)))
        return worst

    def base_task(self, **kw):
        defaults = dict(t_tgt="carved obsidian idol",
                        negatives=("chalk sketch", "neon sign"),
                        patch_fraction=0.45, patches_per_view=2)
        defaults.update(kw)
        return StyleTask(**defaults)

    def test_full_objective_tiled_vs_monolithic(self):
        task = self.base_task()
        deferred, monolithic, bd_d, bd_m = self._grads(task, tile_size=6)
        assert self._max_rel(deferred, monolithic) < 1e-6
        assert bd_d["total"] == pytest.approx(bd_m["total"], rel=1e-9)

    def test_single_tile_degenerate_tiling(self):
        task = self.base_task()
        deferred, monolithic, _, _ = self._grads(task, tile_size=64)
        assert self._max_rel(deferred, monolithic) < 1e-6

    @pytest.mark.parametrize("term", ["dir", "global", "local", "per", "reg"])
    def test_each_term_individually(self, term):
        weights = dict(lambda_g=0.0, lambda_l=0.0, lambda_p=0.0, lambda_r=0.0)
        if term == "global":
            weights["lambda_g"] = 0.2
        elif term == "local":
            weights["lambda_l"] = 0.1
        elif term == "per":
            weights["lambda_p"] = 2.0
        elif term == "reg":
            weights["lambda_r"] = 0.1
        # "dir" has implicit weight 1 and is always on
        task = self.base_task(**weights)
        deferred, monolithic, _, _ = self._grads(task, tile_size=6)
        assert self._max_rel(deferred, monolithic) < 1e-6

    def test_zero_pixel_gradient_gives_zero_parameter_gradient(self):
        # identical target/source prompts with all weights off: G == 0
        dataset, provider, extractor, _ = style_fixtures(px=16)
        task = StyleTask(t_tgt="a photo", t_src="a photo",
                         lambda_g=0.0, lambda_l=0.0, lambda_p=0.0,
                         lambda_r=0.0, patch_fraction=0.45)
        config = tiny_config()
        params = init_params(ARCH, seed=3)
        i_src = dataset.frames[0][0]
        grads, bd = deferred_style_step(
            params, ARCH, dataset.frames[0][1], task, provider, extractor,
            config, i_src, step_seed=5)
        assert bd["dir_degenerate"] is False or True  # flag is informational
        for g in grads:
            np.testing.assert_array_equal(g, 0.0)


class TestStylize:
    def test_requires_reconstructed_tag(self):
        dataset, provider, extractor, task = style_fixtures()
        params = init_params(ARCH, seed=0)
        params.role = "stylized"
        with pytest.raises(ValidationError):
            stylize(params, ARCH, dataset, task, provider, extractor,
                    tiny_config())

    def test_short_run_moves_cosine_and_keeps_source_frozen(self):
        dataset, provider, extractor, task = style_fixtures()
        config = tiny_config(stage2=Stage2Config(epochs=3, lr=5e-3,
                                                 tile_size=8))
        f_rec, _ = train_reconstruction(dataset, ARCH, tiny_config(
            stage1=Stage1Config(epochs=4, lr=5e-3, rays_per_batch=192)))
        before = [t.copy() for t in f_rec.tensors]
        f_sty, report = stylize(f_rec, ARCH, dataset, task, provider,
                                extractor, config)
        assert f_sty.role == "stylized"
        for a, b in zip(f_rec.tensors, before):  # input untouched
            np.testing.assert_array_equal(a, b)
        cosines = [e["cosine_to_target"] for e in report.epochs]
        assert cosines[-1] > cosines[0] - 1e-6
        assert len(report.steps) == config.stage2.epochs * len(dataset.frames)

    def test_identical_prompts_degenerate_dir(self):
        dataset, provider, extractor, _ = style_fixtures()
        task = StyleTask(t_tgt="a photo", t_src="a photo",
                         negatives=("chalk sketch", "neon sign"),
                         patch_fraction=0.45, patches_per_view=1,
                         lambda_g=0.0, lambda_l=0.0)
        f_rec, _ = train_reconstruction(dataset, ARCH, tiny_config())
        f_sty, report = stylize(f_rec, ARCH, dataset, task, provider,
                                extractor, tiny_config())
        # text delta is zero: every step must have used the neutral fallback
        assert all(s["dir"] == 1.0 for s in report.steps)
        # params still move under perceptual+reg alone, but stay bounded
        drift = max(np.max(np.abs(a - b))
                    for a, b in zip(f_sty.tensors, f_rec.tensors))
        assert 0 < drift < 0.1

    def test_freeze_density_keeps_geometry_params(self):
        dataset, provider, extractor, task = style_fixtures()
        config = tiny_config(stage2=Stage2Config(epochs=1, lr=5e-3,
                                                 tile_size=8,
                                                 freeze_density=True))
        f_rec, _ = train_reconstruction(dataset, ARCH, tiny_config())
        f_sty, _ = stylize(f_rec, ARCH, dataset, task, provider, extractor,
                           config)
        n_frozen = 2 * ARCH.depth + 2
        for a, b in zip(f_sty.tensors[:n_frozen], f_rec.tensors[:n_frozen]):
            np.testing.assert_array_equal(a, b)
        assert any(not np.array_equal(a, b) for a, b in
                   zip(f_sty.tensors[n_frozen:], f_rec.tensors[n_frozen:]))


def test_psnr_basics():
    a = np.zeros((4, 4, 3))
    assert psnr(a, a) == float("inf")
    assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)
