import numpy as np
import pytest
from hypothesis import given, strategies as st

from galprune import networks as nw
from galprune import numerics as nx

from helpers import FD_TOL, mask_fd_run


def small_specs():
    return {
        "lenet": nw.build_lenet((4, 6, 12)),
        "minires": nw.build_minires(3, width=4, input_shape=(1, 8, 8)),
        "miniinception": nw.build_miniinception(2, 3, width=3, stem=4, input_shape=(1, 8, 8)),
    }


def all_kinds(spec):
    return [k for k, v in nw.enumerate_structures(spec).items() if v]


class TestBuildersAndCost:
    def test_lenet_baseline_cost(self):
        c = nw.count_cost(nw.build_lenet((20, 50, 500)))
        assert c.flops == 2_293_000
        assert [r["flops"] for r in c.layers] == [288_000, 1_600_000, 400_000, 5_000]
        assert (c.params, c.weights, c.biases) == (431_080, 430_500, 580)

    def test_lenet_pruned_rows(self):
        c = nw.count_cost(nw.build_lenet((4, 13, 121)))
        assert c.flops == 167_178 and c.weights == 27_778 and c.biases == 148
        c = nw.count_cost(nw.build_lenet((2, 15, 106)))
        assert c.flops == 103_300 and round(c.flops / 1e6, 2) == 0.10

    def test_trivial_lenet(self):
        spec = nw.build_lenet((1, 1, 1), classes=1)
        assert nw.infer_shapes(spec)[-1] == (1,)

    def test_single_mac(self):
        spec = nw.ArchitectureSpec((1, 1, 1), 1, [{"kind": "conv", "out": 1, "k": 1}, {"kind": "flatten"},
                                                   {"kind": "linear", "out": 1}])
        assert nw.count_cost(spec).layers[0]["flops"] == 1

    def test_totals_are_layer_sums(self):
        for spec in small_specs().values():
            c = nw.count_cost(spec)
            assert c.flops == sum(r["flops"] for r in c.layers)
            assert c.params == sum(r["params"] for r in c.layers)

    def test_minires_block_cost(self):
        a = nw.count_cost(nw.build_minires(3, width=8))
        b = nw.count_cost(nw.build_minires(2, width=8))
        # two 3x3 same-size convs on a 26x26x8 stream
        assert a.flops - b.flops == 2 * 26 * 26 * 8 * 9 * 8

    def test_minires_block_masks_and_shape(self):
        assert len(nw.enumerate_structures(nw.build_minires(3))["block"]) == 3
        spec = nw.build_minires(1, width=5)
        shapes = nw.infer_shapes(spec)
        assert shapes[1] == shapes[2] == (5, 26, 26)

    def test_miniinception_branches(self):
        spec = nw.build_miniinception(2, 3, width=4)
        assert len(nw.enumerate_structures(spec)["branch"]) == 6
        shapes = nw.infer_shapes(spec)
        for i, layer in enumerate(spec.layers):
            if layer["kind"] == "inception-module":
                assert shapes[i][0] == sum(b["out"] for b in layer["branches"])

    def test_removing_branch_shrinks_concat(self):
        spec = nw.build_miniinception(1, 3, width=4)
        d = spec.to_dict()
        i = next(i for i, l in enumerate(d["layers"]) if l["kind"] == "inception-module")
        before = nw.infer_shapes(spec)[i][0]
        removed = d["layers"][i]["branches"].pop(1)
        d["layers"][-1]["out"] = 10
        after = nw.infer_shapes(nw.ArchitectureSpec.from_dict(d))[i][0]
        assert before - after == removed["out"]

    def test_invalid_specs(self):
        with pytest.raises(nw.ArchitectureError):
            nw.build_lenet((0, 1, 1))
        with pytest.raises(nw.ArchitectureError):
            nw.build_miniinception(1, 1)
        with pytest.raises(nw.ArchitectureError):
            nw.build_minires(0)
        with pytest.raises(nw.ArchitectureError, match="logits"):
            nw.ArchitectureSpec((1, 4, 4), 3, [{"kind": "flatten"}, {"kind": "linear", "out": 2}])
        with pytest.raises(nw.ArchitectureError, match="flatten"):
            nw.ArchitectureSpec((1, 4, 4), 2, [{"kind": "linear", "out": 2}])

    def test_json_round_trip(self):
        for spec in small_specs().values():
            again = nw.ArchitectureSpec.from_json(spec.to_json())
            assert again.to_dict() == spec.to_dict()
        bad = spec.to_dict()
        bad["schema_version"] = 99
        with pytest.raises(nw.ArchitectureError, match="schema"):
            nw.ArchitectureSpec.from_dict(bad)

    def test_describe_widths(self):
        assert nw.describe_widths(nw.build_lenet((20, 50, 500))) == "20-50-500"


class TestMasks:
    def test_lenet_channel_registry(self):
        spec = nw.build_lenet((20, 50, 500))
        net = nw.attach_masks(spec, ["channel"], np.random.default_rng(0))
        hosts = {e.host for e in net.mask.entries}
        assert "0" not in hosts        # first conv never masked
        assert len(net.mask) == 20 + 50 + 500

    def test_joint_registry_disjoint(self):
        spec = nw.build_minires(3, width=4)
        net = nw.attach_masks(spec, ["block", "channel"], np.random.default_rng(0))
        kinds = [e.kind for e in net.mask.entries]
        assert kinds.count("block") == 3
        assert len(set(net.mask.entries)) == len(net.mask.entries)

    def test_missing_kind_lists_available(self):
        with pytest.raises(nw.ArchitectureError, match="available kinds: \\['channel'\\]"):
            nw.attach_masks(nw.build_lenet((2, 2, 2)), ["block"], np.random.default_rng(0))

    def test_seeded_init(self):
        spec = nw.build_lenet((4, 6, 12))
        a = nw.attach_masks(spec, ["channel"], np.random.default_rng(5)).mask.values.data
        b = nw.attach_masks(spec, ["channel"], np.random.default_rng(5)).mask.values.data
        assert np.array_equal(a, b)

    def test_baseline_weights_copied(self):
        spec = nw.build_lenet((4, 6, 12))
        w = nw.init_params(spec, np.random.default_rng(1))
        net = nw.attach_masks(spec, ["channel"], np.random.default_rng(2), baseline=w)
        for k, v in w.items():
            assert np.array_equal(net.params[k].data, v) and net.params[k].data is not v


class TestForward:
    @pytest.mark.parametrize("name", sorted(small_specs()))
    def test_unit_mask_bitwise(self, name):
        spec = small_specs()[name]
        rng = np.random.default_rng(0)
        w = nw.init_params(spec, rng)
        net = nw.attach_masks(spec, all_kinds(spec), rng, baseline=w)
        net.mask.values.data[:] = 1.0
        x = rng.standard_normal((5,) + spec.input_shape)
        plain = nw.forward(spec, nw.make_network(spec, w).params, x).data
        assert np.array_equal(nw.forward_masked(net, x).data, plain)

    def test_zero_block_is_identity(self):
        spec = nw.ArchitectureSpec((3, 6, 6), 3 * 36, [{"kind": "residual-block", "mid": 4}, {"kind": "flatten"}])
        rng = np.random.default_rng(0)
        net = nw.attach_masks(spec, ["block"], rng)
        net.mask.values.data[0] = 0.0
        x = rng.standard_normal((4, 3, 6, 6))
        assert np.array_equal(nw.forward_masked(net, x).data, x.reshape(4, -1))

    @pytest.mark.parametrize("name", sorted(small_specs()))
    def test_zero_mask_nullity(self, name):
        """A zeroed structure's weights can change arbitrarily without affecting the output."""
        spec = small_specs()[name]
        rng = np.random.default_rng(1)
        net = nw.attach_masks(spec, all_kinds(spec), rng)
        x = rng.standard_normal((3,) + spec.input_shape)
        for pos, e in enumerate(net.mask.entries):
            if pos % 3:
                continue
            trial = net.clone()
            trial.mask.values.data[pos] = 0.0
            ref = nw.forward_masked(trial, x).data
            if e.kind == "channel":
                w = trial.params[f"{e.host}.weight"].data
                if w.ndim == 4:
                    w[:, e.index] += 5.0
                else:
                    u = {u.key: u for u in nw.weight_units(spec)}[e.host]
                    w[:, e.index * u.group:(e.index + 1) * u.group] += 5.0
            elif e.kind == "block":
                trial.params[f"{e.host}.conv1.weight"].data += 5.0
                trial.params[f"{e.host}.conv2.bias"].data += 5.0
            else:
                trial.params[f"{e.host}.branch{e.index}.weight"].data += 5.0
                trial.params[f"{e.host}.branch{e.index}.bias"].data += 5.0
            assert np.array_equal(nw.forward_masked(trial, x).data, ref), e

    @pytest.mark.parametrize("name", sorted(small_specs()))
    def test_mask_gradients_finite_differences(self, name):
        spec = small_specs()[name]
        worst, accepted, discarded = mask_fd_run(spec, all_kinds(spec))
        assert accepted == 50 and discarded <= 5
        assert worst < FD_TOL

    def test_dropout_only_when_active(self):
        spec = small_specs()["lenet"]
        rng = np.random.default_rng(0)
        net = nw.attach_masks(spec, ["channel"], rng, dropout_rate=0.5)
        x = rng.standard_normal((2,) + spec.input_shape)
        a = nw.forward_masked(net, x).data
        assert np.array_equal(a, nw.forward_masked(net, x).data)
        b = nw.forward_masked(net, x, noise_active=True, rng=np.random.default_rng(1)).data
        assert not np.array_equal(a, b)
        with pytest.raises(ValueError, match="rng"):
            nw.forward_masked(net, x, noise_active=True)

    def test_input_shape_error(self):
        spec = small_specs()["lenet"]
        net = nw.attach_masks(spec, ["channel"], np.random.default_rng(0))
        with pytest.raises(nx.ShapeError, match="does not match"):
            nw.forward_masked(net, np.zeros((1, 1, 27, 28)))


@given(st.integers(1, 30), st.integers(1, 60), st.integers(1, 600), st.integers(1, 12))
def test_lenet_cost_formula(f1, f2, f3, classes):
    c = nw.count_cost(nw.build_lenet((f1, f2, f3), classes))
    expect = 24 * 24 * f1 * 25 + 8 * 8 * f2 * 25 * f1 + 16 * f2 * f3 + f3 * classes
    assert c.flops == expect
    assert c.params == expect - 24 * 24 * f1 * 25 - 8 * 8 * f2 * 25 * f1 + 25 * f1 + 25 * f1 * f2 + f1 + f2 + f3 + classes
