import json

import numpy as np
import pytest

from radiart.cli import main
from radiart.config import DEFAULTS, load_config, parse_override
from radiart.errors import ValidationError
from radiart.field import FieldArch, init_params, save_checkpoint
from radiart.geometry import ring_cameras, soft_sphere_scene, synthetic_dataset, write_dataset
from radiart.renderer import read_pfm


@pytest.fixture(scope="module")
def scene_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("scene")
    scene = soft_sphere_scene()
    cams = ring_cameras(3, width=16, height_px=16, focal=17.0)
    dataset = synthetic_dataset(scene, cams, step=0.02)
    write_dataset(root / "data", dataset)
    return root


def write_config(path, dataset_dir, out_dir, **extra):
    doc = {
        "dataset": {"path": str(dataset_dir)},
        "arch": {"pe_levels_pos": 3, "pe_levels_dir": 1,
                 "hidden_width": 24, "depth": 2},
        "render": {"samples_per_ray": 10},
        "stage1": {"epochs": 2, "lr": 5e-3, "rays_per_batch": 128},
        "stage2": {"epochs": 1, "lr": 2e-3, "tile_size": 8},
        "task": {"t_tgt": "stained glass window", "patch_fraction": 0.5,
                 "patches_per_view": 1, "negatives_per_step": 4},
        "output_dir": str(out_dir),
        "seed": 1,
    }
    for key, value in extra.items():
        doc.setdefault(key, {}).update(value) if isinstance(value, dict) \
            else doc.__setitem__(key, value)
    path.write_text(json.dumps(doc))
    return path


class TestConfig:
    def test_defaults_snapshot(self):
        # contract-level constants; see the acceptance suite for the rationale
        assert DEFAULTS["task"]["lambda_g"] == 0.2
        assert DEFAULTS["task"]["lambda_l"] == 0.1
        assert DEFAULTS["task"]["lambda_p"] == 2.0
        assert DEFAULTS["task"]["lambda_r"] == 0.1
        assert DEFAULTS["task"]["tau"] == 0.07
        assert DEFAULTS["render"]["samples_per_ray"] == 192
        assert DEFAULTS["task"]["patch_fraction"] == 1.0 / 10.0
        assert DEFAULTS["stage1"]["lr"] == 5e-4
        assert DEFAULTS["stage2"]["lr"] == 1e-3
        assert DEFAULTS["stage1"]["epochs"] == 6
        assert DEFAULTS["stage2"]["epochs"] == 4

    def test_unknown_section_rejected(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"nonsense": {}}))
        with pytest.raises(ValidationError):
            load_config(p)

    def test_unknown_key_rejected(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"task": {"tgt": "typo"}}))
        with pytest.raises(ValidationError):
            load_config(p)

    def test_override_parsing(self):
        assert parse_override("stage1.lr=0.01") == ("stage1", "lr", 0.01)
        assert parse_override("task.t_tgt=bronze statue") == \
            ("task", "t_tgt", "bronze statue")
        with pytest.raises(ValidationError):
            parse_override("no_dot_or_equals")

    def test_override_applies(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"seed": 3}))
        config = load_config(p, ["stage1.epochs=9", "task.tau=0.2"])
        assert config["stage1"]["epochs"] == 9
        assert config["task"]["tau"] == 0.2
        assert config["seed"] == 3


class TestReconstructCommand:
    def test_happy_path(self, scene_dir, tmp_path):
        out = tmp_path / "out"
        cfg = write_config(tmp_path / "c.json", scene_dir / "data", out)
        assert main(["reconstruct", str(cfg)]) == 0
        assert (out / "f_rec.ckpt").exists()
        assert (out / "reconstruct_report.jsonl").exists()

    def test_missing_dataset_exits_2(self, scene_dir, tmp_path):
        cfg = write_config(tmp_path / "c.json", scene_dir / "missing",
                           tmp_path / "out")
        assert main(["reconstruct", str(cfg)]) == 2

    def test_invalid_config_exits_2(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"stage1": {"epochs": 0}}))
        assert main(["reconstruct", str(cfg)]) == 2

    def test_divergent_run_exits_3(self, scene_dir, tmp_path):
        cfg = write_config(tmp_path / "c.json", scene_dir / "data",
                           tmp_path / "out")
        with np.errstate(all="ignore"):
            code = main(["reconstruct", str(cfg), "--set", "stage1.lr=1e200",
                         "--set", "stage1.epochs=10"])
        assert code == 3


class TestStylizeCommand:
    @pytest.fixture()
    def recon_out(self, scene_dir, tmp_path):
        out = tmp_path / "out"
        cfg = write_config(tmp_path / "c.json", scene_dir / "data", out)
        assert main(["reconstruct", str(cfg)]) == 0
        return cfg, out

    def test_happy_path_and_reports(self, recon_out):
        cfg, out = recon_out
        assert main(["stylize", str(cfg), str(out / "f_rec.ckpt")]) == 0
        assert (out / "f_sty.ckpt").exists()
        assert (out / "before_000.png").exists()
        assert (out / "after_000.png").exists()
        records = [json.loads(l) for l in
                   (out / "stylize_report.jsonl").read_text().splitlines()]
        assert any(r["type"] == "step" for r in records)

    def test_wrong_tag_exits_2(self, recon_out, tmp_path):
        cfg, out = recon_out
        from radiart.field import load_checkpoint
        params, arch = load_checkpoint(out / "f_rec.ckpt")
        params.role = "stylized"
        save_checkpoint(tmp_path / "bad.ckpt", params, arch)
        assert main(["stylize", str(cfg), str(tmp_path / "bad.ckpt")]) == 2

    def test_unreachable_bridge_exits_4(self, recon_out):
        cfg, out = recon_out
        code = main(["stylize", str(cfg), str(out / "f_rec.ckpt"),
                     "--set", "provider.embedding=bridge:tcp:127.0.0.1:1",
                     "--set", "provider.timeout=0.5"])
        assert code == 4


class TestRenderCommand:
    @pytest.fixture()
    def ckpt(self, tmp_path):
        arch = FieldArch(pe_levels_pos=2, pe_levels_dir=1,
                         hidden_width=16, depth=2)
        save_checkpoint(tmp_path / "f.ckpt", init_params(arch, 0), arch)
        return tmp_path / "f.ckpt"

    def test_render_pose_writes_png_and_pfm(self, ckpt, scene_dir, tmp_path):
        out = tmp_path / "img"
        code = main(["render", str(ckpt), "--dataset", str(scene_dir / "data"),
                     "--pose-index", "1", "--samples", "8",
                     "--out", str(out)])
        assert code == 0
        assert out.with_suffix(".png").exists()
        assert out.with_suffix(".pfm").exists()

    def test_bad_pose_index_exits_2(self, ckpt, scene_dir, tmp_path):
        code = main(["render", str(ckpt), "--dataset", str(scene_dir / "data"),
                     "--pose-index", "-1", "--samples", "8",
                     "--out", str(tmp_path / "x")])
        assert code == 2

    def test_deterministic_renders_byte_identical_pfm(self, ckpt, scene_dir,
                                                      tmp_path):
        args = ["render", str(ckpt), "--dataset", str(scene_dir / "data"),
                "--samples", "8", "--deterministic"]
        assert main(args + ["--out", str(tmp_path / "a")]) == 0
        assert main(args + ["--out", str(tmp_path / "b")]) == 0
        assert (tmp_path / "a.pfm").read_bytes() == \
            (tmp_path / "b.pfm").read_bytes()

    def test_env_var_equals_flag(self, ckpt, scene_dir, tmp_path, monkeypatch):
        monkeypatch.setenv("RADIART_DETERMINISTIC", "1")
        code = main(["render", str(ckpt), "--dataset", str(scene_dir / "data"),
                     "--samples", "8", "--out", str(tmp_path / "c")])
        assert code == 0


class TestMeshCommand:
    @pytest.fixture()
    def ckpt(self, tmp_path):
        arch = FieldArch(pe_levels_pos=2, pe_levels_dir=1,
                         hidden_width=16, depth=2)
        save_checkpoint(tmp_path / "f.ckpt", init_params(arch, 0), arch)
        return tmp_path / "f.ckpt"

    def test_mesh_writes_obj(self, ckpt, tmp_path):
        out = tmp_path / "m.obj"
        code = main(["mesh", str(ckpt), "--res", "12", "--iso", "0.5",
                     "--out", str(out)])
        assert code == 0
        assert out.exists()

    def test_res_one_exits_2(self, ckpt, tmp_path):
        code = main(["mesh", str(ckpt), "--res", "1",
                     "--out", str(tmp_path / "m.obj")])
        assert code == 2

    def test_empty_surface_still_exits_0(self, ckpt, tmp_path, capsys):
        out = tmp_path / "empty.obj"
        code = main(["mesh", str(ckpt), "--res", "8", "--iso", "1e9",
                     "--out", str(out)])
        assert code == 0
        assert out.exists()
        assert "empty" in capsys.readouterr().err

    def test_bbox_argument(self, ckpt, tmp_path):
        code = main(["mesh", str(ckpt), "--res", "8", "--iso", "0.5",
                     "--bbox=-1,-1,-1,1,1,1",
                     "--out", str(tmp_path / "m.obj")])
        assert code == 0
        assert main(["mesh", str(ckpt), "--res", "8", "--bbox", "1,2",
                     "--out", str(tmp_path / "m.obj")]) == 2


def test_render_pfm_readback(tmp_path):
    arch = FieldArch(pe_levels_pos=2, pe_levels_dir=1, hidden_width=16, depth=2)
    ckpt = tmp_path / "f.ckpt"
    save_checkpoint(ckpt, init_params(arch, 3), arch)
    cam = {"fx": 10.0, "fy": 10.0, "cx": 5.0, "cy": 5.0,
           "width": 10, "height": 10,
           "c2w": list(np.eye(4).ravel())}
    (tmp_path / "cam.json").write_text(json.dumps(cam))
    code = main(["render", str(ckpt), "--camera", str(tmp_path / "cam.json"),
                 "--samples", "8", "--near", "0.5", "--far", "3.0",
                 "--out", str(tmp_path / "r")])
    assert code == 0
    img = read_pfm(tmp_path / "r.pfm")
    assert img.shape == (10, 10, 3)
    assert img.min() >= 0 and img.max() <= 1
