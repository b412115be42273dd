from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from depois_attack.attacks import AttackMode
from depois_attack.defense import REJECTED, DefenseBundle
from depois_attack.errors import ConfigError, DataError
from depois_attack.gates import evaluate_gates
from depois_attack.metrics import (
    CSV_HEADER,
    SweepRecord,
    cell_seed,
    clean_accuracy,
    critic_accuracy,
    depois_accuracy,
    overall_table,
    read_csv,
    records_to_csv,
    run_sweep,
    table_to_markdown,
    write_csv,
)

R = REJECTED

# Published reference point at eps = 0.7 (access, target) -> (ca, da); documentation only, never a gate.
REFERENCE_TABLE = {
    ("white", "Classifier-Only"): (0.3524, 0.3564),
    ("white", "Composed"): (0.2077, 0.2077),
    ("black", "Classifier-Only"): (0.3173, 0.3383),
    ("black", "Composed"): (0.2119, 0.2714),
}


def brute_ca(verdicts):
    hits = 0
    for v in verdicts:
        if v == -1:
            hits += 1
    return hits / len(verdicts)


def brute_da(verdicts, labels):
    hits = 0
    for v, y in zip(verdicts, labels):
        if v in (-1, y):
            hits += 1
    return hits / len(verdicts)


class TestFormulas:
    def test_ca_example(self):
        assert critic_accuracy([R, R, 3]) == 2 / 3
        assert critic_accuracy([R] * 4) == 1.0

    def test_da_example(self):
        assert depois_accuracy([R, 7, 3], [7, 7, 7]) == 2 / 3

    def test_clean_variant_ignores_rejections(self):
        assert clean_accuracy([R, 7, 3], [7, 7, 7]) == 1 / 3

    def test_against_brute_force(self, rng):
        for _ in range(1000):
            n = int(rng.integers(1, 60))
            labels = rng.integers(0, 10, size=n)
            verdicts = rng.integers(-1, 10, size=n)
            assert critic_accuracy(verdicts) == brute_ca(verdicts.tolist())
            assert depois_accuracy(verdicts, labels) == brute_da(verdicts.tolist(), labels.tolist())

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.tuples(st.integers(-1, 9), st.integers(0, 9)), min_size=1, max_size=80))
    def test_ca_le_da(self, pairs):
        verdicts, labels = zip(*pairs)
        ca, da = critic_accuracy(verdicts), depois_accuracy(verdicts, labels)
        assert 0.0 <= ca <= da <= 1.0
        assert Fraction(da).limit_denominator(len(pairs)) * len(pairs) == sum(v in (-1, y) for v, y in pairs)

    def test_empty(self):
        with pytest.raises(ConfigError):
            critic_accuracy([])
        with pytest.raises(ConfigError):
            depois_accuracy([], [])
        with pytest.raises(ConfigError):
            depois_accuracy([1, 2], [1])


def records_for(access=("white",), modes=tuple(AttackMode), eps=(0.0, 0.5)):
    out = []
    for a in access:
        for m in modes:
            for e in eps:
                out.append(SweepRecord(a, m, e, 0.1 + e / 2, 0.2 + e / 2, 10, 0))
    return out


class TestSweep:
    @pytest.fixture(scope="class")
    @classmethod
    def shadow(cls, small_bundle, small_synth):
        return DefenseBundle.calibrate(small_bundle.classifier.clone(), small_bundle.critic.clone(), small_synth["rest"], 0.05)

    def test_record_count_and_order(self, small_bundle, shadow, small_synth):
        ds = small_synth["eval"].subset(range(60))
        recs = run_sweep(small_bundle, shadow, ds, [0.2, 0.0, 0.1], seed=3)
        assert len(recs) == 2 * 4 * 3
        assert recs == sorted(recs, key=SweepRecord.sort_key)
        assert all(r.n == 60 and r.seed == 3 for r in recs)
        assert all(0 <= r.ca <= r.da <= 1 for r in recs)

    def test_zero_epsilon_rows_match(self, small_bundle, small_synth):
        ds = small_synth["eval"]
        recs = run_sweep(small_bundle, None, ds, [0.0], access=("white",))
        assert len({(r.ca, r.da) for r in recs}) == 1
        verdicts = small_bundle.predict(ds.images)
        assert recs[0].ca == critic_accuracy(verdicts)
        assert recs[0].da == depois_accuracy(verdicts, ds.labels)

    def test_black_box_scored_by_original(self, small_bundle, small_synth, monkeypatch):
        calls = {"original": 0}
        shadow = DefenseBundle.calibrate(small_bundle.classifier.clone(), small_bundle.critic.clone(), small_synth["rest"], 0.05)

        def forbidden(x):
            raise AssertionError("shadow verdicts must never be used")

        original_predict = small_bundle.predict

        def counted(x):
            calls["original"] += 1
            return original_predict(x)

        monkeypatch.setattr(shadow, "predict", forbidden)
        monkeypatch.setattr(small_bundle, "predict", counted)
        recs = run_sweep(small_bundle, shadow, small_synth["eval"].subset(range(30)), [0.0, 0.3], access=("black",))
        assert len(recs) == 8 and calls["original"] == 8

    def test_missing_shadow(self, small_bundle, small_synth):
        with pytest.raises(ConfigError, match="shadow"):
            run_sweep(small_bundle, None, small_synth["eval"], [0.1])

    @pytest.mark.parametrize("eps", [[], [1.2], [-0.1]])
    def test_bad_grid(self, small_bundle, small_synth, eps):
        with pytest.raises(ConfigError):
            run_sweep(small_bundle, None, small_synth["eval"], eps, access=("white",))

    def test_cell_seed_stable(self):
        a = cell_seed(0, "white", AttackMode.CRITIC_ONLY, 0.1)
        assert a == cell_seed(0, "white", "critic_only", 0.1)
        assert a != cell_seed(0, "black", AttackMode.CRITIC_ONLY, 0.1)


class TestCsv:
    def test_header_and_format(self):
        text = records_to_csv(records_for())
        lines = text.splitlines()
        assert lines[0] == ",".join(CSV_HEADER) == "access_mode,attack_mode,epsilon,ca,da,n_samples,seed"
        assert lines[1] == "white,critic_only,0.000000,0.100000,0.200000,10,0"
        assert len(lines) == 9

    def test_round_trip(self, tmp_path):
        recs = records_for(access=("white", "black"))
        path = write_csv(list(reversed(recs)), tmp_path / "s.csv")
        back = read_csv(path)
        assert back == sorted(recs, key=SweepRecord.sort_key)
        assert records_to_csv(back) == path.read_text()

    def test_bad_header(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("a,b\n")
        with pytest.raises(DataError):
            read_csv(p)
        with pytest.raises(DataError):
            read_csv(tmp_path / "none.csv")

    def test_overall_table(self):
        recs = records_for(access=("white", "black"), eps=(0.0, 0.6, 0.8))
        rows = overall_table(recs, 0.7)
        assert [(r["access_mode"], r["target"]) for r in rows] == list(REFERENCE_TABLE)
        assert {r["epsilon"] for r in rows} == {0.6}
        md = table_to_markdown(rows)
        assert md.count("\n") == 6


class TestGates:
    def test_all_pass_and_fail(self):
        recs = []
        for a in ("white", "black"):
            for m in AttackMode:
                recs.append(SweepRecord(a, m, 0.0, 0.05, 0.95, 100, 0))
        recs.append(SweepRecord("white", AttackMode.CLASSIFIER_ONLY, 0.5, 0.1, 0.7, 100, 0))
        recs.append(SweepRecord("white", AttackMode.CRITIC_THEN_CLASSIFIER, 0.5, 0.1, 0.4, 100, 0))
        recs.append(SweepRecord("black", AttackMode.CRITIC_THEN_CLASSIFIER, 0.5, 0.1, 0.5, 100, 0))
        gates = {g.name: g.passed for g in evaluate_gates(recs)}
        assert gates == {"clean_da": True, "composed_beats_baseline": True, "composed_da_low": True, "black_box_transfer": True}
        weak = [r if r.epsilon == 0 else SweepRecord(r.access, r.mode, r.epsilon, r.ca, 0.9, r.n, r.seed) for r in recs]
        gates = {g.name: g.passed for g in evaluate_gates(weak)}
        assert gates == {"clean_da": True, "composed_beats_baseline": False, "composed_da_low": False, "black_box_transfer": False}

    @pytest.mark.parametrize("value, passed", [(0.9, True), (0.8999, False)])
    def test_clean_set_gate(self, value, passed):
        gates = evaluate_gates([SweepRecord("white", AttackMode.CRITIC_ONLY, 0.0, 0.05, 0.95, 10, 0)], value)
        assert gates[0].name == "clean_set_accuracy" and gates[0].passed is passed
