"""JSON run-configuration parsing: defaults, field-path diagnostics, byte
offsets for broken documents, and the four-scalar override rule."""

import json
import math

import pytest

from ciar_sim.config import (
    ConfigError,
    apply_overrides,
    load_run_config,
    parse_run_config,
)
from ciar_sim.decoder import DEFAULT_RHO, DEFAULT_TAU, RollingQuantilePolicy


def write_config(tmp_path, data, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(data))
    return path


class TestDefaults:
    def test_empty_document(self):
        cfg = parse_run_config({})
        assert cfg.scene.h == 16 and cfg.scene.w == 16 and cfg.scene.n == 64
        assert cfg.decode.seq_len == 256
        assert cfg.decode.tau == DEFAULT_TAU and cfg.decode.rho == DEFAULT_RHO
        assert cfg.network_name == "5G"
        assert cfg.network.bandwidth_mbps == 300.0 and cfg.network.rtt_ms == 10.0
        assert cfg.model_d == 32
        assert cfg.payload.bits_per_feature == 32.0 * 32
        assert cfg.policies == ("ciar", "uniform", "base_cloud", "base_device")
        assert cfg.training is None and cfg.sweep is None
        assert cfg.output_dir == "out"

    def test_full_document(self):
        cfg = parse_run_config(
            {
                "scene": {"h": 8, "w": 8, "n": 32, "seed": 4},
                "decode": {"K": 3, "tau": 0.1, "rho": 0.2, "seed": 4},
                "model": {"d": 12, "seed": 7, "shared_weights": True},
                "network": {"bandwidth_mbps": 77.0, "rtt_ms": 3.0},
                "payload": {"bits_per_token_up": 16},
                "compute": {"device_ms_per_step": 2.0},
                "training": {"steps": 10, "learning_rate": 0.01},
                "sweep": {"tau": [0.1, 0.2], "seed": [0, 1, 2]},
                "policies": ["ciar", "base_cloud"],
                "split": 0.5,
                "head_path": "head.bin",
                "output_dir": "results",
            }
        )
        assert cfg.scene.n == 32 and cfg.decode.seq_len == 64
        assert cfg.network_name == "custom" and cfg.network.bandwidth_mbps == 77.0
        assert cfg.payload.bits_per_token_up == 16.0
        # omitted payload fields still follow the hidden dimension
        assert cfg.payload.bits_per_feature == 32.0 * 12
        assert cfg.compute.device_ms_per_step == 2.0
        assert cfg.training.steps == 10
        assert cfg.sweep.cells == 6
        assert cfg.sweep.rho == (0.2,) and cfg.sweep.k == (3,)
        assert cfg.policies == ("ciar", "base_cloud")
        assert cfg.head_path == "head.bin" and cfg.output_dir == "results"

    def test_policy_scalar_shorthand(self):
        cfg = parse_run_config({"policy": "base_cloud"})
        assert cfg.policies == ("base_cloud",)

    def test_threshold_policy_block(self):
        cfg = parse_run_config({"decode": {"threshold_policy": {"q": 0.9, "window": 16}}})
        assert cfg.decode.threshold_policy == RollingQuantilePolicy(q=0.9, window=16)


class TestDiagnostics:
    """Every rejection names the offending dotted field path."""

    @pytest.mark.parametrize(
        "data, fragment",
        [
            ({"zzz": 1}, "zzz: unknown field"),
            ({"scene": {"zzz": 1}}, "scene.zzz"),
            ({"scene": {"h": -2}}, "scene: grid must be at least 1x1"),
            ({"scene": 4}, "scene: expected an object"),
            ({"decode": {"tau": float("nan")}}, "decode.tau"),
            ({"decode": {"seq_len": 100}}, "decode.seq_len"),
            ({"decode": {"threshold_policy": {"q": 2.0}}}, "decode.threshold_policy"),
            ({"model": {"d": 0}}, "model.d"),
            ({"model": {"shared_weights": 1}}, "model.shared_weights"),
            ({"network": "LTE"}, "network: unknown profile 'LTE'"),
            ({"network": {"bandwidth_mbps": -1, "rtt_ms": 1}}, "network"),
            ({"payload": {"bits_per_feature": -5}}, "payload"),
            ({"training": {"alpha": -1}}, "training"),
            ({"sweep": {"tau": []}}, "sweep.tau: grid must be nonempty"),
            ({"sweep": {"tau": 0.1}}, "sweep.tau: expected a list"),
            ({"policies": ["warp"]}, "policies: unknown policy 'warp'"),
            ({"policies": []}, "policies"),
            ({"policy": "ciar", "policies": ["ciar"]}, "policy: give either"),
            ({"split": 1.5}, "split"),
            ({"head_path": 7}, "head_path"),
            ({"output_dir": ""}, "output_dir"),
        ],
    )
    def test_field_paths(self, data, fragment):
        with pytest.raises(ConfigError) as excinfo:
            parse_run_config(data)
        assert fragment in str(excinfo.value)

    def test_builtin_names_listed_for_unknown_profile(self):
        with pytest.raises(ConfigError) as excinfo:
            parse_run_config({"network": "LTE"})
        message = str(excinfo.value)
        for name in ("4G", "5G", "WiFi"):
            assert name in message


class TestLoadFile:
    def test_roundtrip(self, tmp_path):
        path = write_config(tmp_path, {"scene": {"h": 8, "w": 8}})
        cfg = load_run_config(path)
        assert cfg.decode.seq_len == 64

    def test_malformed_json_names_byte_offset(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text('{"scene": {"h": 8,}')
        with pytest.raises(ConfigError) as excinfo:
            load_run_config(path)
        assert excinfo.value.byte_offset == 18
        assert "byte offset 18" in str(excinfo.value)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_run_config(tmp_path / "missing.json")

    def test_infinity_literal(self, tmp_path):
        path = tmp_path / "inf.json"
        path.write_text('{"decode": {"tau": Infinity}}')
        cfg = load_run_config(path)
        assert math.isinf(cfg.decode.tau)


class TestOverrides:
    def test_only_four_scalars(self):
        cfg = parse_run_config({"decode": {"tau": 0.1, "rho": 0.1, "seed": 1, "K": 6}})
        out = apply_overrides(cfg, tau=0.3, rho=0.0, seed=9, out="elsewhere")
        assert out.decode.tau == 0.3 and out.decode.rho == 0.0
        assert out.decode.seed == 9 and out.output_dir == "elsewhere"
        # everything else untouched
        assert out.decode.K == 6 and out.scene == cfg.scene
        assert out.payload == cfg.payload

    def test_none_means_keep(self):
        cfg = parse_run_config({})
        assert apply_overrides(cfg) == cfg

    def test_invalid_override_value(self):
        cfg = parse_run_config({})
        with pytest.raises(ConfigError, match="decode.tau"):
            apply_overrides(cfg, tau=float("nan"))
