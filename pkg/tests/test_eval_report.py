import csv
import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nanonas.eval_report import (
    REPORT_COLUMNS, align_identity, identity_summary, model_report, report_csv, report_text, throughput,
)
from nanonas.net import build
from nanonas.quant import FLOAT, QuantSpec, bops, model_size_bytes

from conftest import tiny_config
from oracles import optimal_alignments, sort_percentile

SEQ = st.text("ACGT", min_size=1, max_size=9)


class TestAlignIdentity:
    def test_hand_examples(self):
        r = align_identity("ACGT", "ACG")
        assert (r.matches, r.deletions, r.insertions, r.mismatches) == (3, 1, 0, 0)
        assert r.alignment_length == 4 and r.identity == 0.75
        r = align_identity("AAAA", "TTTT")
        assert r.matches == 0 and r.identity == 0.0
        r = align_identity("GATTACA", "GATTACA")
        assert r.identity == 1.0 and r.mismatches + r.insertions + r.deletions == 0

    @given(SEQ, SEQ)
    @settings(max_examples=300)
    def test_against_exhaustive_oracle(self, call, truth):
        score, optima = optimal_alignments(call, truth)
        r = align_identity(call, truth)
        assert r.score == score
        assert (r.matches, r.alignment_length) in optima
        assert r.matches + r.mismatches + r.deletions == len(call)
        assert r.matches + r.mismatches + r.insertions == len(truth)

    @given(SEQ, SEQ)
    @settings(max_examples=300)
    def test_swap_symmetry(self, call, truth):
        a, b = align_identity(call, truth), align_identity(truth, call)
        assert a.score == b.score
        # tie-breaking is directional, so edit classes only mirror when the optimum is unique
        if len(optimal_alignments(call, truth)[1]) == 1:
            assert (a.matches, a.insertions, a.deletions) == (b.matches, b.deletions, b.insertions)

    @given(SEQ, SEQ)
    def test_identity_bounds(self, call, truth):
        ident = align_identity(call, truth).identity
        assert 0.0 <= ident <= 1.0
        assert (ident == 1.0) == (call == truth)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            align_identity("", "A")


class TestThroughputAndSummary:
    def test_throughput(self):
        assert throughput(5000, 2.0) == 2.5
        assert throughput(10000, 2.0) == 2 * throughput(5000, 2.0)
        assert throughput(5000, 4.0) == throughput(5000, 2.0) / 2
        with pytest.raises(ValueError):
            throughput(10, 0.0)

    @given(st.lists(st.floats(0, 1), min_size=1, max_size=40))
    def test_summary_matches_sort_oracle(self, values):
        s = identity_summary(values)
        for key, q in (("p25", 25), ("median", 50), ("p75", 75)):
            assert s[key] == pytest.approx(sort_percentile(values, q), abs=1e-12)
        assert s["min"] == min(values) and s["max"] == max(values)
        assert s["mean"] == pytest.approx(sum(values) / len(values), abs=1e-12)

    def test_summary_empty(self):
        with pytest.raises(ValueError):
            identity_summary([])


class TestModelReport:
    @pytest.mark.parametrize("quant", [FLOAT, QuantSpec(8, 8), QuantSpec(16, 8)])
    def test_totals_equal_accounting(self, quant):
        model = build(tiny_config(quant=quant))
        rep = model_report(model)
        assert rep["totals"]["bytes"] == model_size_bytes(model)["total_bytes"]
        assert rep["totals"]["bops"] == sum(bops(c) for c in model.layer_costs())
        assert rep["totals"]["params"] == sum(p.data.size for p in model.parameters())

    def test_float_model_size_is_four_bytes_per_param(self):
        rep = model_report(build(tiny_config(quant=FLOAT)))
        assert rep["totals"]["bytes"] == 4 * rep["totals"]["params"]
        assert all(r["bits"] == "<32,32>" for r in rep["rows"])

    def test_text_and_csv(self, tiny_model):
        rep = model_report(tiny_model)
        text = report_text(rep)
        assert text.splitlines()[0].split() == list(REPORT_COLUMNS)
        assert text.splitlines()[-1].startswith("TOTAL")
        rows = list(csv.DictReader(io.StringIO(report_csv(rep))))
        assert len(rows) == len(rep["rows"])
        assert sum(float(r["bytes"]) for r in rows) == rep["totals"]["bytes"]
        assert np.isclose(sum(float(r["latency"]) for r in rows), rep["totals"]["latency"])
