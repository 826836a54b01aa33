import csv
import json

import numpy as np
import pytest
import torch

from sas_saliency.cli import (EXIT_BAD_DATA, EXIT_DIGEST, EXIT_EXISTS, EXIT_NO_CHECKPOINT, EXIT_OK, EXIT_USAGE, main)
from sas_saliency.config import ExperimentConfig
from sas_saliency.io import load_mask, save_checkpoint, save_png
from sas_saliency.model import MBCEDN, small_model_config

TINY = ExperimentConfig(n_scenes=10, size=32, num_apertures=12, epochs=1, batch_size=8, fusion_rounds=1,
                        fusion_epochs=1, superpixels=16, pretrain_epochs=0, augment=False)


def tree_bytes(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.txt"
    TINY.save(path)
    return str(path)


class TestGenerate:
    def test_one_scene(self, tmp_path, tiny_config):
        cfg = tmp_path / "one.txt"
        TINY.replace(n_scenes=1).save(cfg)
        assert main(["generate", "--config", str(cfg), "--out", str(tmp_path / "g")]) == EXIT_OK
        assert sorted(p.name for p in (tmp_path / "g").iterdir() if p.is_dir()) == ["scene_0000"]

    def test_same_seed_identical_trees(self, tmp_path):
        cfg = tmp_path / "c.txt"
        TINY.replace(n_scenes=2, num_views=2).save(cfg)
        for name in ("a", "b"):
            assert main(["generate", "--config", str(cfg), "--seed", "3", "--out", str(tmp_path / name)]) == 0
        assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")
        main(["generate", "--config", str(cfg), "--seed", "4", "--out", str(tmp_path / "c")])
        assert tree_bytes(tmp_path / "a") != tree_bytes(tmp_path / "c")

    def test_three_views_share_shifted_mask(self, tmp_path):
        cfg = tmp_path / "c.txt"
        TINY.replace(n_scenes=1, num_views=3).save(cfg)
        main(["generate", "--config", str(cfg), "--out", str(tmp_path / "g")])
        scene = tmp_path / "g" / "scene_0000"
        assert {p.name for p in scene.glob("stack*.npz")} == {"stack.npz", "stack_v1.npz", "stack_v2.npz"}
        views = json.loads((scene / "spec.json").read_text())["views"]
        ref = load_mask(scene / "mask.png")
        for v in (1, 2):
            np.testing.assert_array_equal(load_mask(scene / f"mask_v{v}.png"),
                                          np.roll(ref, views[v]["offset"], axis=(0, 1)))

    def test_refuses_non_empty_out(self, tmp_path, tiny_config):
        (tmp_path / "g").mkdir()
        (tmp_path / "g" / "keep").write_text("x")
        assert main(["generate", "--config", tiny_config, "--out", str(tmp_path / "g")]) == EXIT_EXISTS
        assert main(["generate", "--config", tiny_config, "--out", str(tmp_path / "g"), "--force"]) == EXIT_OK
        assert not (tmp_path / "g" / "keep").exists()


def zero_bias_model():
    torch.manual_seed(0)
    model = MBCEDN(small_model_config())
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith("bias"):
                p.zero_()
    return model


class TestInferEval:
    def test_zero_image_gives_valid_map(self, tmp_path):
        save_checkpoint(tmp_path / "ck.npz", zero_bias_model())
        save_png(tmp_path / "zero.png", np.zeros((32, 32, 3)))
        code = main(["infer", "--checkpoint", str(tmp_path / "ck.npz"), "--data", str(tmp_path / "zero.png"),
                     "--out", str(tmp_path / "o")])
        assert code == EXIT_OK
        sal = np.load(tmp_path / "o" / "zero_saliency.npy")
        assert sal.shape == (32, 32) and np.isfinite(sal).all() and sal.min() >= 0 and sal.max() <= 1
        assert (tmp_path / "o" / "zero_boxes.csv").read_text().startswith("row0,col0,row1,col1,score")

    def test_eval_pred_equals_truth(self, tmp_path):
        # default scene size: at 32 px some targets are one pixel thick and do not survive box cleanup
        cfg = tmp_path / "c.txt"
        TINY.replace(size=64, num_apertures=36).save(cfg)
        main(["generate", "--config", str(cfg), "--out", str(tmp_path / "g")])
        (tmp_path / "p").mkdir()
        for scene in (tmp_path / "g").glob("scene_*"):
            np.save(tmp_path / "p" / f"{scene.name}_saliency.npy", load_mask(scene / "mask.png").astype(np.float32))
        assert main(["eval", "--pred", str(tmp_path / "p"), "--data", str(tmp_path / "g"),
                     "--out", str(tmp_path / "e")]) == EXIT_OK
        rep = json.loads((tmp_path / "e" / "metrics.json").read_text())
        for k in ("MAP", "AFM", "AIOU", "MAP_det"):
            assert rep[k] == pytest.approx(1.0), k
        assert rep["IAAE"] == pytest.approx(1.0)

    def test_missing_prediction_is_bad_data(self, tmp_path, tiny_config):
        main(["generate", "--config", tiny_config, "--out", str(tmp_path / "g")])
        (tmp_path / "p").mkdir()
        assert main(["eval", "--pred", str(tmp_path / "p"), "--data", str(tmp_path / "g"),
                     "--out", str(tmp_path / "e")]) == EXIT_BAD_DATA


class TestTrainAblate:
    @pytest.fixture(scope="class")
    @staticmethod
    def trained(tmp_path_factory):
        root = tmp_path_factory.mktemp("train")
        TINY.save(root / "c.txt")
        assert main(["train", "--config", str(root / "c.txt"), "--out", str(root / "t")]) == EXIT_OK
        return root

    def test_train_outputs(self, trained):
        out = trained / "t"
        for name in ("checkpoint.npz", "history.jsonl", "split.json", "metrics_saliency.json", "config.txt"):
            assert (out / name).exists(), name
        split = json.loads((out / "split.json").read_text())
        assert tuple(map(len, (split["train"], split["val"], split["test"]))) == (7, 2, 1)

    def test_train_is_deterministic(self, trained):
        assert main(["train", "--config", str(trained / "c.txt"), "--out", str(trained / "t2")]) == EXIT_OK
        for name in ("metrics_saliency.json", "history.jsonl", "split.json"):
            assert (trained / "t" / name).read_bytes() == (trained / "t2" / name).read_bytes(), name

    def test_infer_with_digest_check(self, trained, tmp_path):
        main(["generate", "--config", str(trained / "c.txt"), "--out", str(tmp_path / "g")])
        ck = str(trained / "t" / "checkpoint.npz")
        assert main(["infer", "--config", str(trained / "c.txt"), "--checkpoint", ck, "--data",
                     str(tmp_path / "g"), "--out", str(tmp_path / "o")]) == EXIT_OK
        assert len(list((tmp_path / "o").glob("*_saliency.npy"))) == TINY.n_scenes
        other = tmp_path / "other.txt"
        TINY.replace(use_parsing=False).save(other)
        assert main(["infer", "--config", str(other), "--checkpoint", ck, "--data", str(tmp_path / "g"),
                     "--out", str(tmp_path / "o2")]) == EXIT_DIGEST

    def test_ablate_two_toggles_four_rows(self, tmp_path, tiny_config):
        assert main(["ablate", "--config", tiny_config, "--toggles", "use_parsing,use_unsupervised_branch",
                     "--out", str(tmp_path / "a")]) == EXIT_OK
        with open(tmp_path / "a" / "ablation.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 4 and all(r["status"] == "ok" for r in rows)
        assert {(r["use_parsing"], r["use_unsupervised_branch"]) for r in rows} == {
            ("True", "True"), ("True", "False"), ("False", "True"), ("False", "False")}
        assert (tmp_path / "a" / "ablation.png").exists()


class TestExitCodes:
    def test_usage(self, tmp_path):
        assert main([]) == EXIT_USAGE
        assert main(["train"]) == EXIT_USAGE
        assert main(["ablate", "--toggles", "use_magic", "--out", str(tmp_path / "a")]) == EXIT_USAGE

    def test_bad_config_is_usage(self, tmp_path):
        (tmp_path / "bad.txt").write_text("num_views = 0\n")
        assert main(["generate", "--config", str(tmp_path / "bad.txt"), "--out", str(tmp_path / "g")]) == EXIT_USAGE

    def test_missing_checkpoint(self, tmp_path):
        save_png(tmp_path / "x.png", np.zeros((8, 8, 3)))
        assert main(["infer", "--checkpoint", str(tmp_path / "none.npz"), "--data", str(tmp_path / "x.png"),
                     "--out", str(tmp_path / "o")]) == EXIT_NO_CHECKPOINT

    def test_malformed_dataset(self, tmp_path):
        save_checkpoint(tmp_path / "ck.npz", zero_bias_model())
        (tmp_path / "empty").mkdir()
        assert main(["infer", "--checkpoint", str(tmp_path / "ck.npz"), "--data", str(tmp_path / "empty"),
                     "--out", str(tmp_path / "o")]) == EXIT_BAD_DATA
        assert main(["train", "--data", str(tmp_path / "empty"), "--out", str(tmp_path / "t")]) == EXIT_BAD_DATA

    def test_codes_distinct(self):
        assert len({EXIT_OK, EXIT_USAGE, EXIT_NO_CHECKPOINT, EXIT_BAD_DATA, EXIT_DIGEST, EXIT_EXISTS}) == 6
