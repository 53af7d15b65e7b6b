import numpy as np
import pytest

from bayesseg.archive import MANIFEST, TensorArchive
from bayesseg.config import KEYS, default_config, dump_config, load_config, parse_config
from bayesseg.errors import ConfigError, SchemaError
from bayesseg.evaluation import read_rows, write_rows
from bayesseg.layers import DropoutConfig, PriorConfig
from bayesseg.phantom import PhantomConfig, generate_dataset
from bayesseg.preprocess import Normalizer
from bayesseg.storage import load_checkpoint, load_dataset, load_models, save_checkpoint, save_dataset
from bayesseg.training import TrainedModel
from bayesseg.unet import ModelConfig, build_unet, forward


class TestArchive:
    def test_round_trip(self, tmp_path):
        arch = TensorArchive({"kind": "test"})
        f = np.random.default_rng(0).standard_normal((3, 4)).astype(np.float32)
        u = np.arange(12, dtype=np.uint8).reshape(2, 6)
        arch.add("weights", f, layer="enc0")
        arch.add("labels", u)
        arch.add("scalar", np.float32(2.5))
        arch.save(tmp_path / "a")
        back = TensorArchive.load(tmp_path / "a")
        assert back.attrs == {"kind": "test"}
        assert np.array_equal(back["weights"], f) and back["weights"].dtype == np.dtype("<f4")
        assert np.array_equal(back["labels"], u) and back["labels"].dtype == np.uint8
        assert back["scalar"].shape == () and back["scalar"] == 2.5
        assert back.tensor_attrs["weights"] == {"layer": "enc0"}

    def test_manifest_format(self, tmp_path):
        arch = TensorArchive()
        arch.add("x", np.zeros((2, 3), np.float64))
        arch.save(tmp_path)
        assert (tmp_path / MANIFEST).read_text() == "x f32 2,3 x.bin\n"
        assert (tmp_path / "x.bin").stat().st_size == 24

    def test_byte_length_checked(self, tmp_path):
        arch = TensorArchive()
        arch.add("x", np.zeros(4, np.float32))
        arch.save(tmp_path)
        (tmp_path / "x.bin").write_bytes(b"\0" * 12)
        with pytest.raises(SchemaError):
            TensorArchive.load(tmp_path)

    def test_duplicate_names(self, tmp_path):
        arch = TensorArchive()
        arch.add("x", np.zeros(1, np.float32))
        with pytest.raises(SchemaError):
            arch.add("x", np.zeros(1, np.float32))
        arch.save(tmp_path)
        text = (tmp_path / MANIFEST).read_text()
        (tmp_path / MANIFEST).write_text(text + text)
        with pytest.raises(SchemaError):
            TensorArchive.load(tmp_path)

    @pytest.mark.parametrize("line", ["x f64 1 x.bin", "x f32 a,b x.bin", "x f32 1", "x f32 1 x.bin novalue"])
    def test_malformed_manifest(self, tmp_path, line):
        (tmp_path / "x.bin").write_bytes(b"\0" * 4)
        (tmp_path / MANIFEST).write_text(line + "\n")
        with pytest.raises(SchemaError):
            TensorArchive.load(tmp_path)

    def test_bad_tokens_and_dtypes(self):
        arch = TensorArchive()
        with pytest.raises(SchemaError):
            arch.add("two words", np.zeros(1, np.float32))
        with pytest.raises(SchemaError):
            arch.add("a=b", np.zeros(1, np.float32))
        with pytest.raises(SchemaError):
            arch.add("ints", np.zeros(1, np.int64))

    def test_refuses_overwrite(self, tmp_path):
        arch = TensorArchive()
        arch.add("x", np.zeros(1, np.float32))
        arch.save(tmp_path)
        with pytest.raises(FileExistsError):
            arch.save(tmp_path)
        arch.save(tmp_path, force=True)


class TestStorage:
    def test_dataset_round_trip(self, tmp_path):
        ds = generate_dataset(PhantomConfig(subjects=2, seed=4))
        save_dataset(ds, tmp_path / "d", split="train")
        back = load_dataset(tmp_path / "d")
        assert np.array_equal(back.images, ds.images) and np.array_equal(back.masks, ds.masks)
        assert np.array_equal(back.subject_ids, ds.subject_ids)
        assert np.array_equal(back.slice_indices, ds.slice_indices)
        assert np.array_equal(back.spacing, ds.spacing)
        assert back.attrs["split"] == "train"

    @pytest.mark.parametrize("variant", ["plain", "bbb", "mcd"])
    def test_checkpoint_round_trip(self, tmp_path, variant):
        cfg = ModelConfig(variant=variant, depth=2, base_filters=4, input_size=(16, 16),
                          prior=PriorConfig(0.0, 0.2), dropout=DropoutConfig(0.3, "all_layers"))
        trained = TrainedModel(build_unet(cfg, np.random.default_rng(1)), Normalizer(0.4, 0.05), best_epoch=7)
        save_checkpoint(trained, tmp_path / "m")
        back = load_checkpoint(tmp_path / "m")
        assert back.model.cfg == cfg and back.normalizer == trained.normalizer and back.best_epoch == 7
        x = np.random.default_rng(0).random((1, 1, 16, 16)).astype(np.float32)
        assert np.array_equal(forward(back.model, x)[0], forward(trained.model, x)[0])

    def test_load_models_ensemble(self, tmp_path):
        cfg = ModelConfig(depth=2, base_filters=4, input_size=(16, 16))
        for m in range(3):
            save_checkpoint(TrainedModel(build_unet(cfg, np.random.default_rng(m)), Normalizer(0, 1)),
                            tmp_path / f"member_{m:02d}")
        assert len(load_models(tmp_path)) == 3
        with pytest.raises(FileNotFoundError):
            load_models(tmp_path / "nothing")


class TestConfig:
    def test_defaults(self):
        cfg = default_config()
        assert cfg.data.subjects == 120 and cfg.data.slices_per_subject == 5 and cfg.data.image_size == 64
        assert cfg.model.depth == 4 and cfg.model.base_filters == 8
        assert cfg.qc.thresholds.lv_mm == 1.17 and cfg.qc.thresholds.rv_mm == 1.88
        assert cfg.ensemble.members == 10

    def test_parse(self):
        cfg = parse_config("""
            # a comment
            data.subjects = 6      # trailing
            data.split = 4,1,1
            model.variant = bbb
            model.sigma_prior = 0.2
            train.augment = false
            train.lam = 1
        """)
        assert cfg.data.subjects == 6 and cfg.data.split == (4, 1, 1)
        assert cfg.model.variant == "bbb" and cfg.model.prior.sigma_prior == 0.2
        assert cfg.train.augment is False and cfg.train.lam == 1.0

    @pytest.mark.parametrize("text", ["data.nope = 1", "data.subjects = 0", "data.subjects = x",
                                      "data.subjects = 2\ndata.subjects = 3", "justtext", "train.augment = maybe",
                                      "qc.measure = dice"])
    def test_rejects(self, text):
        with pytest.raises(ConfigError):
            parse_config(text)

    def test_round_trip(self):
        cfg = parse_config("data.subjects = 7\nmodel.variant = mcd\nmodel.dropout_rate = 0.25\neval.T = 9")
        assert parse_config(dump_config(cfg)) == cfg
        assert parse_config(dump_config(default_config())) == default_config()
        assert len(dump_config(cfg).splitlines()) == len(KEYS)

    def test_seed_override(self):
        cfg = default_config().with_seed(5)
        assert cfg.data.seed == cfg.train.seed == cfg.eval.seed == 5
        assert cfg.ensemble_seeds()[:3] == [5, 6, 7]

    def test_input_size_follows_data(self):
        assert parse_config("data.image_size = 32\ndata.spacing_mm = 4.5").model_config().input_size == (32, 32)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "missing.cfg")


class TestCsv:
    def test_round_trip_and_format(self, tmp_path):
        rows = [{"a": 1, "b": 0.1, "c": True}, {"a": 2, "b": float("inf"), "c": False}]
        path = write_rows(rows, tmp_path / "x.csv")
        assert path.read_bytes() == b"a,b,c\n1,0.1,1\n2,inf,0\n"
        back = read_rows(path, required=("a", "b"))
        assert back[0]["b"] == "0.1" and back[1]["c"] == "0"

    def test_missing_columns_named(self, tmp_path):
        path = write_rows([{"a": 1}], tmp_path / "x.csv")
        with pytest.raises(SchemaError, match="assd_ws"):
            read_rows(path, required=("a", "assd_ws"))
