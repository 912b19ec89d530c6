import json

import pytest

from maskrepair.cli import main
from maskrepair.pipeline import load_manifest
from maskrepair.volume import load_nvol


@pytest.fixture(scope="module")
def phantom_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cases")
    assert main(["--seed", "5", "--out", str(out), "phantoms",
                 "--n", "2", "--resolution", "32"]) == 0
    return out


class TestCliPhantoms:
    def test_manifest_and_volumes_exist(self, phantom_dir):
        records = load_manifest(phantom_dir / "manifest.json")
        assert len(records) == 2
        for rec in records:
            app = load_nvol(phantom_dir / rec.appearance_path)
            mask = load_nvol(phantom_dir / rec.mask_path)
            assert app.shape == mask.shape == (32, 32, 32)


class TestCliDistort:
    def test_distort_writes_masks_and_dice(self, phantom_dir, tmp_path):
        out = tmp_path / "distorted"
        code = main(["--seed", "1", "--out", str(out), "distort",
                     "--manifest", str(phantom_dir / "manifest.json")])
        assert code == 0
        records = load_manifest(out / "manifest.json")
        assert all(r.gt_mask_path for r in records)
        csv = (out / "achieved_dice.csv").read_text().splitlines()
        assert csv[0] == "case_id,achieved_dice"
        for line in csv[1:]:
            assert 0.65 <= float(line.split(",")[1]) <= 0.75

    def test_distort_with_config_file(self, phantom_dir, tmp_path):
        cfg = tmp_path / "d.json"
        cfg.write_text(json.dumps({"dice_band": [0.5, 0.9], "max_attempts": 50}))
        out = tmp_path / "d2"
        code = main(["--seed", "2", "--config", str(cfg), "--out", str(out),
                     "distort", "--manifest", str(phantom_dir / "manifest.json")])
        assert code == 0


class TestCliTrainRepairEval:
    @pytest.mark.slow
    def test_full_command_chain(self, phantom_dir, tmp_path):
        dist = tmp_path / "dist"
        assert main(["--seed", "3", "--out", str(dist), "distort",
                     "--manifest", str(phantom_dir / "manifest.json")]) == 0

        cfg = tmp_path / "train.json"
        cfg.write_text(json.dumps({
            "arch": {"latent_dim": 8, "seed_channels": 12, "block_channels": [8],
                     "feature_channels": 4, "head_hidden": [16]},
            "epochs": 5, "train_grid": 16, "points_per_step": 4096,
        }))
        run = tmp_path / "run"
        assert main(["--seed", "3", "--config", str(cfg), "--out", str(run),
                     "train", "--manifest", str(dist / "manifest.json")]) == 0
        assert (run / "checkpoint.json").exists()
        assert (run / "checkpoint_loss.csv").read_text().startswith("epoch,mean_loss")

        rep = tmp_path / "repaired"
        assert main(["--out", str(rep), "repair",
                     "--checkpoint", str(run / "checkpoint.json"),
                     "--manifest", str(dist / "manifest.json")]) == 0

        ev = tmp_path / "eval"
        assert main(["--out", str(ev), "eval",
                     "--manifest", str(rep / "manifest.json")]) == 0
        lines = (ev / "eval.csv").read_text().splitlines()
        assert lines[0] == "case_id,dsc,nsd"
        assert len(lines) == 4


class TestCliBaselineAndMesh:
    def test_baseline_command(self, phantom_dir, tmp_path):
        dist = tmp_path / "dist"
        main(["--seed", "4", "--out", str(dist), "distort",
              "--manifest", str(phantom_dir / "manifest.json")])
        out = tmp_path / "baseline"
        assert main(["--out", str(out), "baseline",
                     "--manifest", str(dist / "manifest.json")]) == 0
        records = load_manifest(out / "manifest.json")
        for rec in records:
            smoothed = load_nvol(out / rec.mask_path)
            assert smoothed.shape == (32, 32, 32)

    def test_mesh_command(self, phantom_dir, tmp_path):
        records = load_manifest(phantom_dir / "manifest.json")
        target = tmp_path / "m.off"
        assert main(["--out", str(target), "mesh",
                     "--input", str(phantom_dir / records[0].mask_path),
                     "--threshold", "0.5", "--format", "off"]) == 0
        text = target.read_text().splitlines()
        assert text[0] == "OFF"
        assert int(text[1].split()[1]) > 0
