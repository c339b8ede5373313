"""Scoring protocol: truncation, judging, aggregation, metric identities,
and the ablation harness over the committed fixture set."""

import random

import pytest
from hypothesis import given, strategies as st

from ragvet.backends import (
    Backends,
    MockRerankerBackend,
    MockSearchBackend,
    ReplayModelBackend,
    load_fixture,
)
from ragvet.cli import load_dataset
from ragvet.core import PipelineConfig, validate_config
from ragvet.evaluation import (
    EvalError,
    JudgeLabel,
    Label,
    MockJudge,
    PromptedJudge,
    aggregate,
    judge_response,
    run_ablation,
    truncate_tokens,
)
from ragvet.templates import PromptTemplate

from conftest import FIXTURES, scripted_model

# Frozen reference rows the aggregator must reproduce, as
# (perfect, missing, incorrect, accuracy%, missing%, hallucination%, truthfulness%).
METRIC_ROWS = [
    (26, 16, 62, 25.00, 15.38, 59.62, -34.62),
    (29, 10, 65, 27.88, 9.62, 62.50, -34.62),
    (4, 99, 1, 3.85, 95.19, 0.96, 2.88),
    (5, 99, 0, 4.81, 95.19, 0.00, 4.81),
    (15, 86, 3, 14.42, 82.69, 2.88, 11.54),
]


def labels_from_counts(perfect=0, acceptable=0, missing=0, incorrect=0):
    return (
        [JudgeLabel.of(Label.PERFECT)] * perfect
        + [JudgeLabel.of(Label.ACCEPTABLE)] * acceptable
        + [JudgeLabel.of(Label.MISSING)] * missing
        + [JudgeLabel.of(Label.INCORRECT)] * incorrect
    )


class TestTruncateTokens:
    def test_prefix_kept(self):
        assert truncate_tokens("a b c", 2) == "a b"

    def test_shorter_than_limit_unchanged(self):
        assert truncate_tokens("a b", 75) == "a b"

    def test_empty_text(self):
        assert truncate_tokens("", 75) == ""

    def test_negative_limit_rejected(self):
        with pytest.raises(ValueError):
            truncate_tokens("a", -1)


class TestJudgeLabel:
    def test_value_mapping_enforced(self):
        with pytest.raises(ValueError):
            JudgeLabel(label=Label.PERFECT, value=0.5)

    @pytest.mark.parametrize("label,value", [
        (Label.PERFECT, 1.0), (Label.ACCEPTABLE, 0.5),
        (Label.MISSING, 0.0), (Label.INCORRECT, -1.0),
    ])
    def test_fixed_values(self, label, value):
        assert JudgeLabel.of(label).value == value


class TestJudgeResponse:
    def test_abstention_is_missing_without_judge_call(self):
        class ExplodingJudge:
            def judge(self, answer, ground_truth):
                raise AssertionError("judge must not be consulted for abstentions")

        label = judge_response("I don't know", "anything", ExplodingJudge())
        assert label.label is Label.MISSING

    def test_mock_exact_match_is_perfect(self):
        label = judge_response("  The Eiffel Tower ", "the eiffel tower", MockJudge())
        assert label.label is Label.PERFECT

    def test_mock_containment_is_acceptable(self):
        label = judge_response("It is the Eiffel Tower in Paris", "eiffel tower", MockJudge())
        assert label.label is Label.ACCEPTABLE

    def test_mock_disjoint_is_incorrect(self):
        assert judge_response("a kettle", "a falcon", MockJudge()).label is Label.INCORRECT

    def test_answer_truncated_before_judging(self):
        long_answer = "right " * 80 + "wrong tail"
        seen = {}

        class CapturingJudge:
            def judge(self, answer, ground_truth):
                seen["answer"] = answer
                return JudgeLabel.of(Label.INCORRECT)

        judge_response(long_answer, "right", CapturingJudge())
        assert len(seen["answer"].split()) == 75
        assert "tail" not in seen["answer"]

    def test_never_incorrect_for_abstention(self):
        for truth in ("", "anything", "I don't know"):
            label = judge_response("I don't know", truth, MockJudge())
            assert label.label is not Label.INCORRECT


class TestPromptedJudge:
    def _judge(self, reply):
        from ragvet.backends import Role

        backend = scripted_model({"role": Role.VERIFIER, "match": "", "response": reply})
        template = PromptTemplate(system="grade", user="{ground_truth} vs {answer}")
        return PromptedJudge(backend, template)

    def test_label_token_extracted(self):
        assert self._judge("Acceptable").judge("a", "b").label is Label.ACCEPTABLE

    def test_unlabelled_reply_is_an_error(self):
        with pytest.raises(EvalError):
            self._judge("hmm, not sure").judge("a", "b")


class TestAggregate:
    @pytest.mark.parametrize("perfect,missing,incorrect,acc,miss,hall,truth", METRIC_ROWS)
    def test_reference_rows_reproduced(self, perfect, missing, incorrect, acc, miss, hall, truth):
        report = aggregate(labels_from_counts(perfect=perfect, missing=missing,
                                              incorrect=incorrect))
        assert report.n == 104
        assert report.accuracy * 100 == pytest.approx(acc, abs=0.01)
        assert report.missing_rate * 100 == pytest.approx(miss, abs=0.01)
        assert report.hallucination_rate * 100 == pytest.approx(hall, abs=0.01)
        assert report.truthfulness * 100 == pytest.approx(truth, abs=0.01)

    def test_all_missing_truthfulness_zero(self):
        report = aggregate(labels_from_counts(missing=5))
        assert report.truthfulness == 0.0

    def test_perfect_and_incorrect_cancel(self):
        report = aggregate(labels_from_counts(perfect=1, incorrect=1))
        assert report.truthfulness == 0.0
        assert report.accuracy == 0.5

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            aggregate([])

    @given(
        perfect=st.integers(0, 30), acceptable=st.integers(0, 30),
        missing=st.integers(0, 30), incorrect=st.integers(0, 30),
    )
    def test_rates_partition_and_identity(self, perfect, acceptable, missing, incorrect):
        if perfect + acceptable + missing + incorrect == 0:
            return
        report = aggregate(labels_from_counts(perfect, acceptable, missing, incorrect))
        assert report.accuracy + report.missing_rate + report.hallucination_rate == pytest.approx(1.0)
        assert -1.0 <= report.truthfulness <= 1.0
        if acceptable == 0:
            assert report.truthfulness == pytest.approx(
                report.accuracy - report.hallucination_rate
            )

    def test_permutation_invariant(self):
        labels = labels_from_counts(perfect=3, acceptable=2, missing=4, incorrect=1)
        rng = random.Random(5)
        for _ in range(10):
            shuffled = labels[:]
            rng.shuffle(shuffled)
            assert aggregate(shuffled) == aggregate(labels)


@pytest.fixture(scope="module")
def ablation_setup():
    cfg = validate_config(PipelineConfig(mode="task2plus"))
    model = ReplayModelBackend.from_file(FIXTURES / "ablation_replay.json")
    search = MockSearchBackend(load_fixture(FIXTURES / "ablation_search.json"))
    backends = Backends(
        router_model=model, vlm=model, reranker=MockRerankerBackend(), search=search
    )
    dataset = load_dataset(FIXTURES / "ablation_dataset.jsonl")
    return cfg, dataset, backends


class TestRunAblation:
    def test_unknown_mode_rejected(self, ablation_setup):
        cfg, dataset, backends = ablation_setup
        with pytest.raises(EvalError, match="unknown ablation mode"):
            run_ablation("bogus", dataset, cfg, backends)

    def test_vision_only_never_abstains(self, ablation_setup):
        cfg, dataset, backends = ablation_setup
        report = run_ablation("vision_only", dataset, cfg, backends)
        assert report.missing_rate == 0.0

    def test_full_beats_no_cov_on_truthfulness(self, ablation_setup):
        cfg, dataset, backends = ablation_setup
        full = run_ablation("full", dataset, cfg, backends)
        no_cov = run_ablation("no_cov", dataset, cfg, backends)
        assert full.truthfulness > no_cov.truthfulness
        assert full.accuracy >= no_cov.accuracy

    def test_naive_rag_hallucinates_more_than_full(self, ablation_setup):
        cfg, dataset, backends = ablation_setup
        naive = run_ablation("rag_naive", dataset, cfg, backends)
        full = run_ablation("full", dataset, cfg, backends)
        assert naive.hallucination_rate > full.hallucination_rate

    def test_exact_agreement_mode_abstains_on_split_answers(self, ablation_setup):
        cfg, dataset, backends = ablation_setup
        report = run_ablation("no_cov_no_sc", dataset, cfg, backends)
        assert report.missing_rate > 0.0


def test_forced_disagreement_drives_missing_rate_to_one(tmp_path):
    # Dual-path agreement gate with answers that never match: abstain everywhere.
    import json

    dataset_path = tmp_path / "d.jsonl"
    dataset_path.write_text(
        "\n".join(
            json.dumps({
                "conversation_id": f"d{i}",
                "image_ref": None,
                "turns": [{"query": f"splitq{i} token{i}", "ground_truth": f"gt{i}"}],
            })
            for i in range(4)
        ) + "\n",
        encoding="utf-8",
    )
    entries = []
    for i in range(4):
        entries.append({"role": "router", "match": f"splitq{i}",
                        "response": "1. Needs External Info: no\n2. Is Real-Time: no"})
        entries.append({"role": "generator",
                        "match": ["Context:", f"Question: splitq{i} token{i}"],
                        "response": f"first{i}"})
        entries.append({"role": "generator", "match": f"Question: splitq{i} token{i}",
                        "response": f"second{i}"})
    from ragvet.backends import SearchFixture, _entry_from_dict

    model = ReplayModelBackend([_entry_from_dict(e, "inline") for e in entries])
    backends = Backends(
        router_model=model, vlm=model, reranker=MockRerankerBackend(),
        search=MockSearchBackend(SearchFixture(image_index={}, web_index=())),
    )
    cfg = validate_config(PipelineConfig(mode="task2plus"))
    report = run_ablation("no_cov_no_sc", load_dataset(dataset_path), cfg, backends)
    assert report.missing_rate == 1.0
