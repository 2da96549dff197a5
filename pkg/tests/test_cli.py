import json
import os

import pytest

from carl import cli, policy, telbridge, twinsim
from carl.fswactions import MacroAction

from conftest import rollout_states

FAST_SPACECRAFT = "[spacecraft]\nepisode_horizon = 1800.0\n"

TRAIN_12 = FAST_SPACECRAFT + """
[train]
episodes_per_iteration = 1
total_iterations = 12
minibatch_size = 64
seed = 4
"""

SWEEP_SMALL = FAST_SPACECRAFT + """
[sweep]
x_steps = 6
y_steps = 5
background_samples = 3
seed = 2
"""


def write(path, text):
    path.write_text(text)
    return str(path)


class TestExitCodes:
    def test_missing_config_is_config_error(self, tmp_path):
        code = cli.main(["train", "--config", str(tmp_path / "nope.toml"),
                         "--out", str(tmp_path / "out")])
        assert code == cli.EXIT_CONFIG

    def test_unknown_section_rejected(self, tmp_path):
        cfg = write(tmp_path / "bad.toml", "[warp]\nspeed = 9\n")
        code = cli.main(["train", "--config", cfg, "--out", str(tmp_path / "out")])
        assert code == cli.EXIT_CONFIG

    def test_unknown_train_key_rejected(self, tmp_path):
        cfg = write(tmp_path / "bad.toml", "[train]\nwarp_factor = 2\n")
        code = cli.main(["train", "--config", cfg, "--out", str(tmp_path / "out")])
        assert code == cli.EXIT_CONFIG

    def test_bad_checkpoint_is_checkpoint_error(self, tmp_path):
        ck = write(tmp_path / "ck.json", "{not json")
        cfg = write(tmp_path / "cfg.toml", SWEEP_SMALL)
        code = cli.main(["sweep", "--config", cfg, "--checkpoint", ck,
                         "--out", str(tmp_path / "map")])
        assert code == cli.EXIT_CHECKPOINT


class TestTrainCommand:
    def test_twelve_episode_run_checkpoints_and_determinism(self, tmp_path, capsys):
        cfg = write(tmp_path / "cfg.toml", TRAIN_12)
        out1, out2 = tmp_path / "run1", tmp_path / "run2"
        assert cli.main(["train", "--config", cfg, "--out", str(out1)]) == cli.EXIT_OK
        assert cli.main(["train", "--config", cfg, "--out", str(out2)]) == cli.EXIT_OK
        capsys.readouterr()
        names = sorted(p for p in os.listdir(out1) if p.startswith("checkpoint"))
        assert names == ["checkpoint_ep000005.json", "checkpoint_ep000010.json"]
        r1 = json.loads((out1 / "report.json").read_text())
        r2 = json.loads((out2 / "report.json").read_text())
        assert [it["mean_episode_reward"] for it in r1["iterations"]] == \
               [it["mean_episode_reward"] for it in r2["iterations"]]
        ck1 = (out1 / "checkpoint_ep000010.json").read_bytes()
        ck2 = (out2 / "checkpoint_ep000010.json").read_bytes()
        assert ck1 == ck2

    def test_seed_flag_overrides(self, tmp_path, capsys):
        cfg = write(tmp_path / "cfg.toml", TRAIN_12)
        out1, out2 = tmp_path / "a", tmp_path / "b"
        cli.main(["train", "--config", cfg, "--out", str(out1), "--seed", "9"])
        cli.main(["train", "--config", cfg, "--out", str(out2)])
        capsys.readouterr()
        ck1 = (out1 / "checkpoint_ep000010.json").read_bytes()
        ck2 = (out2 / "checkpoint_ep000010.json").read_bytes()
        assert ck1 != ck2


class TestSweepCommand:
    def test_uniform_fixture_gray_blend(self, tmp_path, capsys):
        ck = tmp_path / "uniform.json"
        policy.save(policy.zero_params(), str(ck))
        cfg = write(tmp_path / "cfg.toml", SWEEP_SMALL)
        out = tmp_path / "map"
        assert cli.main(["sweep", "--config", cfg, "--checkpoint", str(ck),
                         "--mode", "blend", "--out", str(out)]) == cli.EXIT_OK
        capsys.readouterr()
        ppm = (tmp_path / "map.ppm").read_bytes()
        pixels = ppm.split(b"\n", 3)[3]
        assert set(pixels) == {85}

    def test_argmax_mode_pure_colors(self, tmp_path, capsys):
        ck = tmp_path / "p.json"
        policy.save(policy.init_params(3), str(ck))
        cfg = write(tmp_path / "cfg.toml", SWEEP_SMALL)
        out = tmp_path / "map"
        assert cli.main(["sweep", "--config", cfg, "--checkpoint", str(ck),
                         "--mode", "argmax", "--out", str(out)]) == cli.EXIT_OK
        capsys.readouterr()
        pixels = (tmp_path / "map.ppm").read_bytes().split(b"\n", 3)[3]
        for i in range(0, len(pixels), 3):
            assert tuple(pixels[i:i + 3]) in {(255, 0, 0), (0, 255, 0), (0, 0, 255)}

    def test_bitwise_reproducible(self, tmp_path, capsys):
        ck = tmp_path / "p.json"
        policy.save(policy.init_params(3), str(ck))
        cfg = write(tmp_path / "cfg.toml", SWEEP_SMALL)
        cli.main(["sweep", "--config", cfg, "--checkpoint", str(ck),
                  "--mode", "stochastic", "--out", str(tmp_path / "m1")])
        cli.main(["sweep", "--config", cfg, "--checkpoint", str(ck),
                  "--mode", "stochastic", "--out", str(tmp_path / "m2")])
        capsys.readouterr()
        assert (tmp_path / "m1.ppm").read_bytes() == (tmp_path / "m2.ppm").read_bytes()
        assert (tmp_path / "m1.csv").read_bytes() == (tmp_path / "m2.csv").read_bytes()


class TestSanityCommand:
    def test_uniform_fixture_fails_suite(self, tmp_path, capsys):
        ck = tmp_path / "uniform.json"
        policy.save(policy.zero_params(), str(ck))
        code = cli.main(["sanity", "--checkpoint", str(ck)])
        out = capsys.readouterr().out
        assert code == cli.EXIT_SANITY
        assert "FAIL" in out


class TestShadowCommand:
    def make_stream(self, tmp_path, config, n=10, break_lines=0):
        params = policy.init_params(8)
        state, obs = twinsim.reset(config, 11)
        states, actions = [state], []
        for _ in range(n):
            logits, _ = policy.forward(params, obs)
            action = policy.argmax(policy.distribution(logits))
            state, result = twinsim.step(state, action, config)
            obs = result.observation
            states.append(state)
            actions.append(int(action))
            if result.terminated or result.truncated:
                break
        logits, _ = policy.forward(params, obs)
        actions.append(int(policy.argmax(policy.distribution(logits))))
        rows = telbridge.synthesize_telemetry(states, config, actions=actions)
        lines = [json.dumps(r) for r in rows]
        for i in range(break_lines):
            lines[1 + i] = "{broken json"
        telemetry = tmp_path / "telemetry.jsonl"
        telemetry.write_text("\n".join(lines) + "\n")
        ck = tmp_path / "ck.json"
        policy.save(params, str(ck))
        frac = states[0].battery_energy / config.battery_capacity
        cfg = write(tmp_path / "cfg.toml", FAST_SPACECRAFT + f"""
[shadow]
format = "json_lines"
initial_charge_fraction = {frac!r}
""")
        return cfg, str(ck), str(telemetry)

    def test_self_consistent_stream_agreement(self, tmp_path, capsys, fast_config):
        cfg, ck, telemetry = self.make_stream(tmp_path, fast_config)
        log = tmp_path / "shadow.jsonl"
        code = cli.main(["shadow", "--config", cfg, "--checkpoint", ck,
                         "--telemetry", telemetry, "--out", str(log)])
        out = capsys.readouterr().out
        assert code == cli.EXIT_OK
        assert "agreement 1.0000" in out
        entries = [json.loads(line) for line in log.read_text().splitlines()]
        assert all(e["recommended_action"] == e["actual_mode"] for e in entries)

    def test_skip_threshold_exceeded(self, tmp_path, capsys, fast_config):
        cfg, ck, telemetry = self.make_stream(tmp_path, fast_config, break_lines=2)
        code = cli.main(["shadow", "--config", cfg, "--checkpoint", ck,
                         "--telemetry", telemetry, "--max-skip-fraction", "0.05"])
        capsys.readouterr()
        assert code == cli.EXIT_RUNTIME

    def test_skips_tolerated_under_threshold(self, tmp_path, capsys, fast_config):
        cfg, ck, telemetry = self.make_stream(tmp_path, fast_config, break_lines=2)
        code = cli.main(["shadow", "--config", cfg, "--checkpoint", ck,
                         "--telemetry", telemetry, "--max-skip-fraction", "0.5"])
        capsys.readouterr()
        assert code == cli.EXIT_OK


class TestPackCommand:
    def write_entries(self, tmp_path, n=50):
        path = tmp_path / "log.jsonl"
        rows = [{"timestamp": float(i), "recommended_action": "charge",
                 "operator_script": "1 x"} for i in range(n)]
        path.write_text("\n".join(json.dumps(r) for r in rows) + "\n")
        return str(path)

    def test_pack_and_unpack(self, tmp_path, capsys):
        infile = self.write_entries(tmp_path)
        out = tmp_path / "pkt.bin"
        code = cli.main(["pack", "--in", infile, "--whitelist",
                         "timestamp,recommended_action", "--budget", "100000",
                         "--out", str(out)])
        capsys.readouterr()
        assert code == cli.EXIT_OK
        entries = telbridge.unpack_downlink(out.read_bytes())
        assert len(entries) == 50
        assert set(entries[0]) == {"timestamp", "recommended_action"}

    def test_over_budget_exit_code(self, tmp_path, capsys):
        infile = self.write_entries(tmp_path)
        code = cli.main(["pack", "--in", infile, "--whitelist", "timestamp",
                         "--budget", "10", "--out", str(tmp_path / "pkt.bin")])
        capsys.readouterr()
        assert code == cli.EXIT_BUDGET

    def test_whitelist_required(self, tmp_path, capsys):
        infile = self.write_entries(tmp_path)
        code = cli.main(["pack", "--in", infile, "--budget", "1000",
                         "--out", str(tmp_path / "pkt.bin")])
        capsys.readouterr()
        assert code == cli.EXIT_CONFIG
