import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from moeprune import kvtext
from moeprune.config import RunConfig
from moeprune.errors import ConfigError

keys = st.text(alphabet="abcdefghijklmnopqrstuvwxyz_", min_size=1, max_size=8)
scalars = st.one_of(st.integers(-10**12, 10**12), st.floats(allow_nan=False, allow_infinity=False),
                    st.booleans(), st.text(max_size=10), st.none(),
                    st.lists(st.integers(-5, 5), max_size=4))
trees = st.recursive(scalars, lambda inner: st.dictionaries(keys, inner, min_size=1, max_size=4), max_leaves=12)


@settings(max_examples=200, deadline=None)
@given(st.dictionaries(keys, trees, min_size=1, max_size=5))
def test_kvtext_roundtrip(d):
    assert kvtext.loads(kvtext.dumps(d)) == d


def test_kvtext_float_exact():
    x = 0.1 + 0.2
    assert kvtext.loads(kvtext.dumps({"a": {"b": x}}))["a"]["b"] == x


def test_kvtext_comments_and_errors():
    assert kvtext.loads("# note\n\na.b = 1\n") == {"a": {"b": 1}}
    for bad in ("a.b 1", "a = nope", "a = 1\na = 2", "a = 1\na.b = 2"):
        with pytest.raises(ConfigError):
            kvtext.loads(bad)
    with pytest.raises(ConfigError):
        kvtext.dumps({"a b": 1})


def test_run_config_roundtrip(tmp_path):
    cfg = RunConfig().with_overrides(prune={"beta": 0.5, "mode": "staged"}, train={"seeds": (4, 5)})
    path = tmp_path / "c.txt"
    cfg.save(path)
    back = RunConfig.load(path)
    assert back == cfg and back.dumps() == cfg.dumps()
    assert back.task.cluster_centers.tolist() == cfg.task.cluster_centers.tolist()


def test_run_config_validation():
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"bogus": {}})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"format_version": 99})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"model": {"feature_dim": 8}})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"train": {"subtask": 8}})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"prune": {"gamma": -1}})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"train": {"no_such_knob": 1}})


def test_task_override_regenerates_centers():
    a = RunConfig()
    b = a.with_overrides(task={"seed": 1})
    assert a.task.cluster_centers.tolist() != b.task.cluster_centers.tolist()
