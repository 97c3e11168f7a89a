import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from docsegtr import checkpoint
from docsegtr.config import RunConfig
from docsegtr.errors import ConfigError, FormatError
from docsegtr.model import DocSegTr
from docsegtr.training import OptimizerState


class TestRunConfig:
    def test_text_round_trip(self):
        cfg = RunConfig(n=4, milestones=(10, 20), use_attention=False, lr=0.0125, nms_method="linear")
        assert RunConfig.from_text(cfg.to_text()) == cfg

    def test_defaults_round_trip(self):
        assert RunConfig.from_text(RunConfig().to_text()) == RunConfig()

    def test_comments_and_blank_lines(self):
        cfg = RunConfig.from_text("# tiny\n\nn = 4   # grid\nuse_transformer = false\n")
        assert cfg.n == 4 and cfg.use_transformer is False

    @pytest.mark.parametrize("text, fragment", [
        ("bogus = 1\n", "unknown key"),
        ("n = four\n", "bad value"),
        ("n = 4\nn = 5\n", "duplicate"),
        ("just words\n", "key = value"),
        ("use_attention = maybe\n", "boolean"),
    ])
    def test_malformed(self, text, fragment):
        with pytest.raises(ConfigError, match=fragment):
            RunConfig.from_text(text)

    @pytest.mark.parametrize("text", [
        "num_heads = 3\n",          # 32 channels not divisible by 3
        "theta = 2\n",              # kernel side must be odd
        "height = 100\n",           # not a multiple of 64
        "lr = -1\n",
        "milestones = 20,10\n",
        "nms_method = hard\n",
        "K = -1\n",
    ])
    def test_owning_module_constraints_revalidated(self, text):
        with pytest.raises(ConfigError):
            RunConfig.from_text(text)

    def test_auto_milestones(self):
        assert RunConfig().milestones_for(2000) == (1400, 1700)
        assert RunConfig(milestones=(5,)).milestones_for(2000) == (5,)

    def test_load_reports_path(self, tmp_path):
        p = tmp_path / "run.cfg"
        p.write_text("n = 0\n")
        with pytest.raises(ConfigError, match="run.cfg"):
            RunConfig.load(p)


def tiny_model(**kw):
    return DocSegTr(RunConfig(height=64, width=64, n=4, **kw).model_config(), seed=0)


class TestCheckpoint:
    def test_save_load_save_identical(self, tmp_path):
        model = tiny_model()
        opt = OptimizerState(iter=7)
        opt.velocity = {name: np.full(p.shape, 0.5) for name, p in model.named_parameters()}
        a, b = tmp_path / "a.dsgt", tmp_path / "b.dsgt"
        checkpoint.save(a, checkpoint.collect(model, opt))
        checkpoint.save(b, checkpoint.load(a))
        assert a.read_bytes() == b.read_bytes()

    def test_restore_model_and_optimizer(self, tmp_path):
        src = tiny_model()
        opt = OptimizerState(iter=12)
        opt.velocity = {name: np.ones(p.shape) for name, p in src.named_parameters()}
        entries = checkpoint.loads(checkpoint.dumps(checkpoint.collect(src, opt)))
        dst = DocSegTr(RunConfig(height=64, width=64, n=4).model_config(), seed=99)
        opt2 = OptimizerState()
        checkpoint.restore(dst, entries, opt2)
        assert opt2.iter == 12 and set(opt2.velocity) == set(opt.velocity)
        for (name, p), (_, q) in zip(src.named_parameters(), dst.named_parameters()):
            np.testing.assert_array_equal(p.data.astype(np.float32), q.data, err_msg=name)

    def test_header_layout(self):
        buf = checkpoint.dumps({"w": np.arange(6, dtype=np.float64).reshape(2, 3)})
        assert buf[:4] == b"DSGT"
        assert int.from_bytes(buf[4:8], "little") == checkpoint.VERSION
        assert int.from_bytes(buf[8:12], "little") == 1
        # name length, name, ndim, dims, then 6 float32 values
        assert len(buf) == 12 + 4 + 1 + 4 + 8 + 24
        np.testing.assert_array_equal(np.frombuffer(buf[-24:], "<f4"), np.arange(6))

    def test_mismatch_lists_missing_and_extra(self):
        with_tr = checkpoint.collect(tiny_model())
        without = tiny_model(use_transformer=False)
        with pytest.raises(ConfigError) as err:
            checkpoint.restore(without, with_tr)
        msg = str(err.value)
        assert "extra" in msg and "encoder.0.fc1.w" in msg and "pos.row" in msg

        with pytest.raises(ConfigError, match="missing: .*encoder"):
            checkpoint.restore(tiny_model(), checkpoint.collect(without))

    def test_shape_mismatch(self):
        entries = checkpoint.collect(tiny_model())
        other = DocSegTr(RunConfig(height=64, width=64, n=4, c_mask=8).model_config())
        with pytest.raises(ConfigError, match="shape"):
            checkpoint.restore(other, entries)

    @pytest.mark.parametrize("mutate, fragment", [
        (lambda b: b"XXXX" + b[4:], "not a DSGT"),
        (lambda b: b[:-3], "truncated"),
        (lambda b: b + b"\0", "trailing"),
        (lambda b: b[:4] + (9).to_bytes(4, "little") + b[8:], "version"),
    ])
    def test_corrupt(self, mutate, fragment):
        buf = checkpoint.dumps({"a": np.ones(3), "b": np.zeros((2, 2))})
        with pytest.raises(FormatError, match=fragment):
            checkpoint.loads(mutate(buf))

    def test_duplicate_names_rejected(self):
        one = checkpoint.dumps({"a": np.ones(1)})
        body = one[12:]
        buf = one[:8] + (2).to_bytes(4, "little") + body + body
        with pytest.raises(FormatError, match="duplicate"):
            checkpoint.loads(buf)


names = st.text(alphabet="abcdefghij._0123456789", min_size=1, max_size=12)
arrays = st.lists(st.integers(0, 3), min_size=0, max_size=3).map(tuple).flatmap(
    lambda shape: st.builds(lambda seed: np.random.default_rng(seed).normal(size=shape),
                            st.integers(0, 2**32 - 1)))


@settings(max_examples=60, deadline=None)
@given(st.dictionaries(names, arrays, max_size=5))
def test_round_trip_property(entries):
    back = checkpoint.loads(checkpoint.dumps(entries))
    assert list(back) == list(entries)
    for k, v in entries.items():
        assert back[k].shape == np.shape(v)
        np.testing.assert_array_equal(back[k], np.asarray(v, dtype=np.float32))
    assert checkpoint.dumps(back) == checkpoint.dumps(entries)
