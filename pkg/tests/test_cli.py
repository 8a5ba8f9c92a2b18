import json
from pathlib import Path

import numpy as np
import pytest

from facexplain import cli, facealign, imaging
from facexplain.evalharness import DatasetManifest, ManifestEntry, save_manifest
from synthfaces import place_landmarks, render_face

CLASSES = ["angry", "happy", "sad"]


def make_dataset(root: Path, n_per_class=2, side=64, interocular=16.0):
    """Blob faces with landmarks; per-class brightness marks nothing special."""
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(42)
    entries = []
    i = 0
    for label in CLASSES:
        for _ in range(n_per_class):
            jitter = rng.uniform(-3, 3, size=2)
            tilt = float(rng.uniform(-8, 8))
            pts = place_landmarks(center=(side / 2 + jitter[0], side / 2 + jitter[1]),
                                  interocular=interocular, tilt_deg=tilt)
            img = render_face(pts, shape=(side, side))
            imaging.write_png(root / f"img_{i:03d}.png", img)
            facealign.write_pts(root / f"img_{i:03d}.pts", pts)
            entries.append(ManifestEntry(image=str(root / f"img_{i:03d}.png"), label=label,
                                         landmarks=str(root / f"img_{i:03d}.pts")))
            i += 1
    manifest = DatasetManifest(entries=entries)
    save_manifest(root / "manifest.csv", manifest)
    return root / "manifest.csv"


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("faces")
    return make_dataset(root)


class TestAlign:
    def test_empty_manifest_fails(self, tmp_path, capsys):
        path = tmp_path / "empty.csv"
        path.write_text("image,label,landmarks\n")
        rc = cli.main(["align", "--manifest", str(path), "--out", str(tmp_path / "out")])
        assert rc == 1
        assert "no entries" in capsys.readouterr().err

    def test_three_rows_produce_artifacts(self, dataset, tmp_path):
        out = tmp_path / "aligned"
        rc = cli.main(["align", "--manifest", str(dataset), "--out", str(out)])
        assert rc == 0
        pngs = sorted(out.glob("img_*.png"))
        assert len(pngs) == 6
        for png in pngs:
            assert imaging.read_png(png).shape[:2] == (224, 224)
            assert png.with_suffix(".pts").exists()
        summary = json.loads((out / "align_summary.json").read_text())
        assert summary["aligned"] == 6
        assert (out / "run.config").exists()
        assert (out / "aligned_manifest.csv").exists()

    def test_malformed_pts_skipped(self, dataset, tmp_path):
        bad_pts = tmp_path / "bad.pts"
        bad_pts.write_text("not a pts file")
        manifest = tmp_path / "m.csv"
        src = Path(str(dataset)).parent
        manifest.write_text(
            "image,label,landmarks\n"
            f"{src}/img_000.png,angry,{src}/img_000.pts\n"
            f"{src}/img_001.png,angry,{bad_pts}\n")
        out = tmp_path / "out"
        rc = cli.main(["align", "--manifest", str(manifest), "--out", str(out)])
        assert rc == 0
        summary = json.loads((out / "align_summary.json").read_text())
        assert summary["aligned"] == 1
        assert len(summary["skipped"]) == 1


class TestExplain:
    def test_unknown_method_usage_error(self, dataset, tmp_path):
        with pytest.raises(SystemExit) as exc:
            cli.main(["explain", "--manifest", str(dataset), "--out", str(tmp_path),
                      "--method", "grad", "--class-name", "happy", "--oracle", "face-parts"])
        assert exc.value.code == 2

    def test_lime_face_parts_localizes_mouth(self, dataset, tmp_path):
        out = tmp_path / "lime"
        rc = cli.main(["explain", "--manifest", str(dataset), "--out", str(out),
                       "--method", "lime", "--class-name", "angry",  # class 0 -> mouth
                       "--oracle", "face-parts", "--samples", "256", "--regions", "12"])
        assert rc == 0
        for i in range(6):
            rmap = imaging.read_xhm1(out / f"img_{i:03d}.xhm1")
            pts = facealign.parse_pts(Path(str(dataset)).parent / f"img_{i:03d}.pts")
            mouth = facealign.part_masks(pts, rmap.shape)["mouth"]
            # relevance is constant per superpixel, so compare densities
            assert rmap[mouth].mean() > 2.0 * max(rmap[~mouth].mean(), 1e-12), f"image {i}"
            meta = json.loads((out / f"img_{i:03d}.json").read_text())
            assert meta["method"] == "lime" and "region_count" in meta

    def test_rise_seed_reproducible_bytes(self, dataset, tmp_path):
        outs = []
        for run in range(2):
            out = tmp_path / f"rise{run}"
            rc = cli.main(["explain", "--manifest", str(dataset), "--out", str(out),
                           "--method", "rise", "--class-name", "happy",
                           "--oracle", "face-parts", "--masks", "200", "--seed", "7"])
            assert rc == 0
            outs.append(sorted(out.glob("*.xhm1")))
        for a, b in zip(*outs):
            assert a.read_bytes() == b.read_bytes()

    def test_static_oracle_region_indicator(self, tmp_path):
        img = np.full((32, 32), 0.9)
        imaging.write_png(tmp_path / "toy.png", img)
        mask = np.zeros((32, 32))
        mask[8:16, 8:16] = 1.0
        imaging.write_png(tmp_path / "mask.png", mask)
        manifest = tmp_path / "m.csv"
        manifest.write_text(f"image,label,landmarks\n{tmp_path}/toy.png,region,\n")
        out = tmp_path / "out"
        rc = cli.main(["explain", "--manifest", str(manifest), "--out", str(out),
                       "--method", "lime", "--class-name", "region",
                       "--oracle", f"region-indicator:{tmp_path}/mask.png",
                       "--input-size", "32,32", "--samples", "128", "--regions", "8"])
        assert rc == 0
        rmap = imaging.read_xhm1(out / "toy.xhm1")
        inside = rmap[8:16, 8:16].mean()
        outside = rmap.sum() - rmap[8:16, 8:16].sum()
        assert inside > 2.0 * max(outside / (32 * 32 - 64), 1e-12)


class TestEvaluateCommand:
    def test_mean_brightness_perfect(self, tmp_path):
        for i, (label, v) in enumerate([("bright", 0.9), ("dark", 0.1)] * 3):
            imaging.write_png(tmp_path / f"t{i}.png", np.full((16, 16), v))
        manifest = tmp_path / "m.csv"
        manifest.write_text("image,label,landmarks\n" + "".join(
            f"{tmp_path}/t{i}.png,{label},\n"
            for i, (label, _) in enumerate([("bright", 0.9), ("dark", 0.1)] * 3)))
        out = tmp_path / "out"
        rc = cli.main(["evaluate", "--manifest", str(manifest), "--out", str(out),
                       "--oracle", "mean-brightness", "--input-size", "16,16"])
        assert rc == 0
        payload = json.loads((out / "metrics.json").read_text())
        assert payload["accuracy"] == 1.0
        assert (out / "confusion.csv").exists()
        assert (out / "records.jsonl").exists()
        assert (out / "confusion_matrix.png").exists()
        assert (out / "metrics.png").exists()

    def test_face_parts_oracle_and_kfold(self, dataset, tmp_path):
        out = tmp_path / "out"
        rc = cli.main(["evaluate", "--manifest", str(dataset), "--out", str(out),
                       "--oracle", "face-parts", "--kfold", "3", "--seed", "1"])
        assert rc == 0
        assert len(list(out.glob("fold_*.csv"))) == 3
        records = (out / "records.jsonl").read_text().strip().splitlines()
        assert len(records) == 6

    def test_constant_oracle_on_balanced_manifest(self, tmp_path):
        # zero weight field -> always predicts the complement class
        np.random.default_rng(0)
        weights = np.zeros((16, 16), dtype=np.float32)
        imaging.write_xhm1(tmp_path / "w.xhm1", weights)
        rows = []
        for i, label in enumerate(["weighted", "rest"] * 3):
            imaging.write_png(tmp_path / f"c{i}.png", np.full((16, 16), 0.5))
            rows.append(f"{tmp_path}/c{i}.png,{label},")
        manifest = tmp_path / "m.csv"
        manifest.write_text("image,label,landmarks\n" + "\n".join(rows) + "\n")
        out = tmp_path / "out"
        rc = cli.main(["evaluate", "--manifest", str(manifest), "--out", str(out),
                       "--oracle", f"linear-weights:{tmp_path}/w.xhm1",
                       "--input-size", "16,16"])
        assert rc == 0
        payload = json.loads((out / "metrics.json").read_text())
        assert payload["accuracy"] == 0.5
        assert payload["predicted_share"]["rest"] == 1.0


class TestAggregate:
    def run_pipeline(self, dataset, tmp_path, policy="ground-truth"):
        eval_out = tmp_path / "eval"
        assert cli.main(["evaluate", "--manifest", str(dataset), "--out", str(eval_out),
                         "--oracle", "face-parts"]) == 0
        expl_out = tmp_path / "expl"
        for class_name in CLASSES:
            assert cli.main(["explain", "--manifest", str(dataset), "--out", str(expl_out),
                             "--method", "lime", "--class-name", class_name,
                             "--oracle", "face-parts", "--samples", "192",
                             "--regions", "10"]) == 0
        agg_out = tmp_path / "agg"
        rc = cli.main(["aggregate", "--expl-dir", str(expl_out),
                       "--records", str(eval_out / "records.jsonl"),
                       "--landmarks-dir", str(Path(str(dataset)).parent),
                       "--out", str(agg_out), "--policy", policy, "--side", "64"])
        return rc, agg_out

    def test_three_class_triples(self, dataset, tmp_path):
        rc, out = self.run_pipeline(dataset, tmp_path)
        assert rc == 0
        for name in CLASSES:
            assert (out / f"global_{name}.xhm1").exists()
            assert (out / f"global_{name}_grey.png").exists()
            assert (out / f"global_{name}_color.png").exists()
            prov = json.loads((out / f"global_{name}.json").read_text())
            assert prov["policy"] == "ground-truth"
            assert prov["count"] == 2
            assert prov["method"] == "lime"
        assert (out / "heatmaps.png").exists()

    def test_all_wrong_true_positive_fails(self, dataset, tmp_path, capsys):
        eval_out = tmp_path / "eval"
        cli.main(["evaluate", "--manifest", str(dataset), "--out", str(eval_out),
                  "--oracle", "face-parts"])
        # corrupt the records: rewrite preds to a never-matching cycle
        records = (eval_out / "records.jsonl").read_text().strip().splitlines()
        flipped = []
        for line in records:
            obj = json.loads(line)
            obj["pred"] = {"angry": "happy", "happy": "sad", "sad": "angry"}[obj["label"]]
            flipped.append(json.dumps(obj))
        (eval_out / "records.jsonl").write_text("\n".join(flipped) + "\n")
        rc = cli.main(["aggregate", "--expl-dir", str(tmp_path), "--records",
                       str(eval_out / "records.jsonl"),
                       "--landmarks-dir", str(Path(str(dataset)).parent),
                       "--out", str(tmp_path / "agg"), "--policy", "true-positive"])
        assert rc == 1
        assert "true-positive" in capsys.readouterr().err


class TestFoldsCommand:
    def test_writes_disjoint_folds(self, dataset, tmp_path):
        out = tmp_path / "folds"
        rc = cli.main(["folds", "--manifest", str(dataset), "--out", str(out),
                       "--k", "3", "--seed", "5"])
        assert rc == 0
        files = sorted(out.glob("fold_*.csv"))
        assert len(files) == 3
        seen = []
        for f in files:
            seen += [ln.split(",")[0] for ln in f.read_text().strip().splitlines()[1:]]
        assert len(seen) == 6 and len(set(seen)) == 6


class TestConfigFile:
    def test_config_merged_under_flags(self, dataset, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("seed=7\nmasks=150\nmethod=rise\n")
        out = tmp_path / "out"
        rc = cli.main(["--config", str(cfg), "explain", "--manifest", str(dataset),
                       "--out", str(out), "--method", "rise", "--class-name", "happy",
                       "--oracle", "face-parts", "--masks", "120"])  # flag beats config
        assert rc == 0
        resolved = dict(line.split("=", 1)
                        for line in (out / "run.config").read_text().splitlines())
        assert resolved["seed"] == "7"     # from config
        assert resolved["masks"] == "120"  # flag wins

    def test_rerun_from_resolved_config_reproduces(self, dataset, tmp_path):
        out1 = tmp_path / "a"
        assert cli.main(["explain", "--manifest", str(dataset), "--out", str(out1),
                         "--method", "rise", "--class-name", "sad",
                         "--oracle", "face-parts", "--masks", "100", "--seed", "3"]) == 0
        # re-run purely from the persisted config (fresh out dir)
        cfg_lines = [ln for ln in (out1 / "run.config").read_text().splitlines()
                     if not ln.startswith("out=")]
        cfg = tmp_path / "replay.cfg"
        cfg.write_text("\n".join(cfg_lines) + "\n")
        out2 = tmp_path / "b"
        assert cli.main(["--config", str(cfg), "explain", "--manifest", str(dataset),
                         "--out", str(out2), "--method", "rise",
                         "--class-name", "sad", "--oracle", "face-parts"]) == 0
        for a in sorted(out1.glob("*.xhm1")):
            assert a.read_bytes() == (out2 / a.name).read_bytes()
