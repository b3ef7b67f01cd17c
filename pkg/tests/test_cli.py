"""Tests for the sketchforge command line."""

import pandas as pd
import pytest

from sketchforge import features as feat
from sketchforge import patchmatch as pm
from sketchforge.cli import main
from sketchforge.fileio import write_image
from sketchforge.synthetic import reference_pairs, small_extractor

SMALL_RUN = "gen_features = 4\ngen_blocks = 1\ndisc_features = 2\npm_layers = 3\naugment = false\nk_ref = 2\n"


@pytest.fixture
def dataset(tmp_path):
    photos, sketches = tmp_path / "photos", tmp_path / "sketches"
    for pair in reference_pairs(3, (32, 32), seed=4):
        write_image(photos / f"{pair.pair_id}.ppm", pair.photo)
        write_image(sketches / f"{pair.pair_id}.pgm", pair.sketch)
    (tmp_path / "run.cfg").write_text(SMALL_RUN)
    return tmp_path


class TestUsage:

    def test_no_command(self):
        assert main([]) == 2

    def test_unknown_config_key(self, tmp_path, capsys):
        (tmp_path / "bad.cfg").write_text("learning_rate = 0.1\n")
        assert main(["selfcheck", "--config", str(tmp_path / "bad.cfg")]) == 2
        assert "learning_rate" in capsys.readouterr().err

    def test_missing_store(self, dataset):
        code = main(["train", "--photos", str(dataset / "photos"), "--store", str(dataset / "absent.skrs"),
                     "--extractor", str(dataset / "absent.skfw")])
        assert code == 2

    def test_eval_list_missing_columns(self, tmp_path, capsys):
        (tmp_path / "pairs.csv").write_text("synthesized\na.pgm\n")
        assert main(["eval", "--pairs", str(tmp_path / "pairs.csv")]) == 2
        assert "ground_truth" in capsys.readouterr().err


class TestPrep:

    def test_empty_directory(self, tmp_path):
        (tmp_path / "photos").mkdir()
        (tmp_path / "landmarks").mkdir()
        code = main(["prep", "--photos", str(tmp_path / "photos"), "--landmarks", str(tmp_path / "landmarks"),
                     "--out", str(tmp_path / "out")])
        assert code == 0
        assert pd.read_csv(tmp_path / "out" / "manifest.csv").empty


class TestStoreVersion:

    def test_version_mismatch_reports_found(self, dataset, capsys):
        extractor = small_extractor(seed=0)
        feat.save_weights(dataset / "vgg.skfw", extractor)
        store_path = dataset / "refs.skrs"
        pm.build_reference_store(reference_pairs(1, (32, 32)), extractor, ["relu3_1"]).save(store_path)
        data = bytearray(store_path.read_bytes())
        data[4] = 9
        store_path.write_bytes(bytes(data))

        code = main(["train", "--photos", str(dataset / "photos"), "--store", str(store_path),
                     "--extractor", str(dataset / "vgg.skfw")])
        assert code == 1
        assert "found 9" in capsys.readouterr().err


@pytest.mark.slow
class TestPipeline:

    def test_selfcheck(self, capsys):
        assert main(["selfcheck", "--quick"]) == 0
        assert "FAIL" not in capsys.readouterr().out

    def test_end_to_end(self, dataset):
        config = ["--config", str(dataset / "run.cfg")]
        extractor, store = str(dataset / "vgg.skfw"), str(dataset / "refs.skrs")
        assert main(["init-extractor", *config, "--extractor", extractor, "--width-scale", "0.0625"]) == 0
        assert main(["build-ref", *config, "--photos", str(dataset / "photos"),
                     "--sketches", str(dataset / "sketches"), "--extractor", extractor, "--store", store]) == 0
        assert main(["match", *config, str(dataset / "photos" / "pair00.ppm"), "--store", store,
                     "--extractor", extractor, "--out", str(dataset / "match.csv"),
                     "--dump-pixels", str(dataset / "match.pgm")]) == 0
        assert main(["train", *config, "--photos", str(dataset / "photos"), "--store", store,
                     "--extractor", extractor, "--checkpoints", str(dataset / "ckpt"),
                     "--iterations", "2", "--batch-size", "2"]) == 0
        assert main(["synth", *config, "--checkpoint", str(dataset / "ckpt" / "latest.skck"),
                     "--photos", str(dataset / "photos"), "--out", str(dataset / "synth")]) == 0

        names = ["pair00", "pair01", "pair02"]
        pd.DataFrame({
            "name": names,
            "synthesized": [f"synth/{n}.pgm" for n in names],
            "ground_truth": [f"sketches/{n}.pgm" for n in names],
        }).to_csv(dataset / "pairs.csv", index=False)
        assert main(["eval", *config, "--pairs", str(dataset / "pairs.csv"), "--smooth",
                     "--excel", str(dataset / "report.xlsx"), "--recognition", str(dataset / "rec.csv"),
                     "--dims", "1,2"]) == 0

        assert len(pd.read_csv(dataset / "match.csv")) == 6 * 6
        history = pd.read_csv(dataset / "ckpt" / "history.csv")
        assert list(history["iter"]) == [1, 2]
        metrics = pd.read_csv(dataset / "metrics.csv")
        assert list(metrics["name"]) == names
        assert {"ssim", "fsim", "ssim_smoothed", "fsim_smoothed"} <= set(metrics.columns)
        assert list(pd.read_csv(dataset / "rec.csv")["used_dims"]) == [1, 2]
        assert (dataset / "report.xlsx").stat().st_size > 0
