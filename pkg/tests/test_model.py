import json

import numpy as np
import pytest

from axialseg import model as M
from axialseg.model import AttentionVariant, CheckpointError, ConfigError, SegModelConfig, build
from axialseg.tensor import Graph, ShapeError
from axialseg.training import bce_dice_loss, gradcheck

from conftest import max_rel_error, numeric_grad


def _tiny(variant="gated", **kw):
    base = dict(d_model=4, heads=2, num_blocks=1, downsample_factor=2, attention_variant=variant, input_size=(8, 8))
    base.update(kw)
    return SegModelConfig(**base)


class TestConfig:
    def test_heads_must_divide_width(self):
        with pytest.raises(ConfigError, match="divisible"):
            SegModelConfig(d_model=8, heads=3)

    def test_downsample_power_of_two(self):
        with pytest.raises(ConfigError):
            SegModelConfig(downsample_factor=3, input_size=(12, 12))

    def test_input_divisible_by_downsample(self):
        with pytest.raises(ConfigError):
            SegModelConfig(downsample_factor=4, input_size=(18, 16))

    def test_dict_round_trip(self):
        cfg = _tiny("full2d", seed=9)
        assert SegModelConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


class TestParameterCount:
    def test_default_config_by_hand(self):
        # stem, per-block (ln1, ln2, two axial layers with 3 gates each, ffn), decoder, head
        stem = (9 * 1 * 16 + 16) + (9 * 16 * 16 + 16)
        axial_layer = 4 * 16 * 16 + 3 * 16 * (2 * 16 - 1) + 3
        block = 2 * 16 + 2 * 16 + 2 * axial_layer + (16 * 32 + 32) + (32 * 16 + 16)
        expected = stem + 2 * block + (9 * 16 * 16 + 16) + (16 + 1)
        assert expected == 17149
        cfg = SegModelConfig()
        assert M.parameter_count(cfg) == expected
        assert build(cfg).num_parameters() == expected

    @pytest.mark.parametrize("variant", list(AttentionVariant))
    @pytest.mark.parametrize("ds", [1, 2, 4])
    def test_closed_form_matches_build(self, variant, ds):
        cfg = SegModelConfig(d_model=8, heads=2, num_blocks=3, downsample_factor=ds, attention_variant=variant, input_size=(16, 24))
        assert build(cfg).num_parameters() == M.parameter_count(cfg)

    def test_gates_are_the_only_difference(self):
        gated = build(_tiny("gated"))
        axial = build(_tiny("axial"))
        extra = set(gated.params) - set(axial.params)
        assert extra and all("gate" in name for name in extra)
        assert gated.num_parameters() - axial.num_parameters() == len(extra)


class TestForward:
    @pytest.mark.parametrize("variant", list(AttentionVariant))
    def test_shape_and_range(self, rng, variant):
        net = build(_tiny(variant))
        out = net(rng.uniform(size=(1, 8, 8))).data
        assert out.shape == (1, 8, 8)
        assert np.all((out > 0) & (out < 1))

    def test_rejects_wrong_input_size(self, rng):
        with pytest.raises(ShapeError):
            build(_tiny())(rng.uniform(size=(1, 8, 16)))

    def test_determinism(self, rng):
        x = rng.uniform(size=(1, 8, 8))
        a, b = build(_tiny(seed=3)), build(_tiny(seed=3))
        for name in a.params:
            assert a.params[name].data.tobytes() == b.params[name].data.tobytes()
        assert a(x).data.tobytes() == b(x).data.tobytes()

    def test_seed_changes_weights(self):
        a, b = build(_tiny(seed=0)), build(_tiny(seed=1))
        assert not np.array_equal(a.params["stem.conv1.weight"].data, b.params["stem.conv1.weight"].data)

    def test_unit_gates_match_ungated_bitwise(self, rng):
        gated = build(_tiny("gated", seed=4))
        axial = build(_tiny("axial", seed=11))
        for name, p in axial.params.items():
            p.data = gated.params[name].data.copy()
        gated.set_gates(1.0)
        x = rng.uniform(size=(1, 8, 8))
        assert gated(x).data.tobytes() == axial(x).data.tobytes()

    @pytest.mark.parametrize("seed", [0, 1, 2, 3])
    def test_end_to_end_gradcheck(self, seed):
        # Every coordinate, step 1e-5. Entries with |grad| < 1e-6 sit near the
        # central-difference roundoff floor (~1e-11 absolute on a loss of ~0.7),
        # so those are held to an absolute bound instead of a relative one.
        rng = np.random.default_rng(seed)
        net = build(_tiny("gated", seed=seed))
        x = rng.uniform(size=(1, 8, 8))
        mask = (rng.uniform(size=(1, 8, 8)) < 0.3).astype(float)
        with Graph() as g:
            grads = g.backward(bce_dice_loss(net(x), mask))
        worst = 0.0
        for p in net.parameters():
            original = p.data

            def f(values):
                p.data = values
                return bce_dice_loss(net(x), mask).item()

            numeric = numeric_grad(f, original, eps=1e-5)
            p.data = original
            analytic = grads[p]
            big = np.abs(analytic) >= 1e-6
            if big.any():
                worst = max(worst, max_rel_error(analytic[big], numeric[big]))
            assert np.abs(analytic[~big] - numeric[~big]).max(initial=0.0) < 1e-10, p.name
        assert worst < 1e-4

    def test_gradcheck_report_on_model(self, rng):
        net = build(_tiny("axial", seed=2))
        x = rng.uniform(size=(1, 8, 8))
        weights = rng.standard_normal((1, 8, 8))
        rep = gradcheck(lambda: net(x), net.parameters(), loss_weights=weights, eps=1e-4, max_coords=24, seed=0)
        assert rep.ok(1e-4), (rep.worst_param, rep.max_rel_error)
        assert rep.coords_checked > 0 and set(rep.per_param) == set(net.params)


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path, rng):
        net = build(_tiny("full2d", seed=5))
        path = tmp_path / "m.json"
        M.save_checkpoint(net, path)
        back = M.load_checkpoint(path)
        assert back.config == net.config
        assert list(back.params) == list(net.params)
        for name, p in net.params.items():
            assert back.params[name].data.tobytes() == p.data.tobytes()
        x = rng.uniform(size=(1, 8, 8))
        assert back(x).data.tobytes() == net(x).data.tobytes()

    def test_save_is_deterministic(self, tmp_path):
        net = build(_tiny())
        M.save_checkpoint(net, tmp_path / "a.json")
        M.save_checkpoint(net, tmp_path / "b.json")
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()

    def test_truncated(self, tmp_path):
        path = tmp_path / "m.json"
        M.save_checkpoint(build(_tiny()), path)
        path.write_bytes(path.read_bytes()[:-40])
        with pytest.raises(CheckpointError, match="malformed"):
            M.load_checkpoint(path)

    def _edit(self, path, fn):
        doc = json.loads(path.read_text())
        fn(doc)
        path.write_text(json.dumps(doc))

    def test_shape_mismatch_names_parameter(self, tmp_path):
        path = tmp_path / "m.json"
        M.save_checkpoint(build(_tiny()), path)

        def edit(doc):
            entry = next(e for e in doc["params"] if e["name"] == "blocks.0.ff1.weight")
            entry["shape"] = [4, 8, 1, 1]

        self._edit(path, edit)
        with pytest.raises(CheckpointError, match="blocks.0.ff1.weight"):
            M.load_checkpoint(path)

    def test_version_mismatch(self, tmp_path):
        path = tmp_path / "m.json"
        M.save_checkpoint(build(_tiny()), path)
        self._edit(path, lambda doc: doc.update(version=99))
        with pytest.raises(CheckpointError, match="version"):
            M.load_checkpoint(path)

    def test_missing_parameter(self, tmp_path):
        path = tmp_path / "m.json"
        M.save_checkpoint(build(_tiny()), path)
        self._edit(path, lambda doc: doc["params"].pop())
        with pytest.raises(CheckpointError, match="missing"):
            M.load_checkpoint(path)

    def test_value_count(self, tmp_path):
        path = tmp_path / "m.json"
        M.save_checkpoint(build(_tiny()), path)
        self._edit(path, lambda doc: doc["params"][0]["data"].pop())
        with pytest.raises(CheckpointError, match="values"):
            M.load_checkpoint(path)
