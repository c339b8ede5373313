"""Scoring protocol: four-level judge labels, rate aggregation, truncation,
and the ablation harness.

The abstention string maps straight to Missing without consulting any judge.
Accuracy counts Perfect plus Acceptable; the truthfulness score weighs
Perfect 1.0, Acceptable 0.5, and Incorrect -1.0, so it equals accuracy minus
hallucination rate exactly when no Acceptable labels occur.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from enum import Enum
from typing import Any, Optional, Protocol, Sequence

from .backends import Backends, BackendError, ModelBackend, ModelRequest, Role
from .core import AnswerPair, Conversation, PipelineConfig, QueryTurn
from .generation import check_consistency, generate_direct, generate_rag
from .pipeline import ConversationState, run_conversation, _empty_context, _run_retrieval, _TurnClock
from .router import route
from .runtime import Deadline, Trace
from .templates import PromptTemplate, resolve_template

__all__ = [
    "Label",
    "JudgeLabel",
    "MetricsReport",
    "WhitespaceTokenizer",
    "truncate_tokens",
    "MockJudge",
    "PromptedJudge",
    "judge_response",
    "aggregate",
    "ABLATION_MODES",
    "run_ablation",
    "EvalError",
]

DEFAULT_TOKEN_LIMIT = 75

JUDGE_MAX_TOKENS = 16


class EvalError(RuntimeError):
    """Evaluation cannot proceed with integrity."""


class Label(str, Enum):
    PERFECT = "Perfect"
    ACCEPTABLE = "Acceptable"
    MISSING = "Missing"
    INCORRECT = "Incorrect"


_LABEL_VALUES = {
    Label.PERFECT: 1.0,
    Label.ACCEPTABLE: 0.5,
    Label.MISSING: 0.0,
    Label.INCORRECT: -1.0,
}


@dataclass(frozen=True)
class JudgeLabel:
    label: Label
    value: float

    def __post_init__(self) -> None:
        if self.value != _LABEL_VALUES[self.label]:
            raise ValueError(f"{self.label.value} must carry value {_LABEL_VALUES[self.label]}")

    @classmethod
    def of(cls, label: Label) -> "JudgeLabel":
        return cls(label=label, value=_LABEL_VALUES[label])


@dataclass(frozen=True)
class MetricsReport:
    n: int
    counts: dict[Label, int]
    accuracy: float
    missing_rate: float
    hallucination_rate: float
    truthfulness: float

    def to_dict(self) -> dict[str, Any]:
        return {
            "n": self.n,
            "counts": {label.value: self.counts.get(label, 0) for label in Label},
            "accuracy": self.accuracy,
            "missing_rate": self.missing_rate,
            "hallucination_rate": self.hallucination_rate,
            "truthfulness": self.truthfulness,
        }


class Tokenizer(Protocol):
    def tokenize(self, text: str) -> list[str]: ...

    def render(self, tokens: Sequence[str]) -> str: ...


class WhitespaceTokenizer:
    """Default truncation tokenizer; a BPE implementation can be swapped in."""

    def tokenize(self, text: str) -> list[str]:
        return text.split()

    def render(self, tokens: Sequence[str]) -> str:
        return " ".join(tokens)


def truncate_tokens(text: str, n: int, tokenizer: Optional[Tokenizer] = None) -> str:
    """Re-render the first n tokens of text under the tokenizer contract."""
    if n < 0:
        raise ValueError("n must be >= 0")
    tokenizer = tokenizer or WhitespaceTokenizer()
    return tokenizer.render(tokenizer.tokenize(text)[:n])


class JudgeBackend(Protocol):
    def judge(self, answer: str, ground_truth: str) -> JudgeLabel: ...


def _normalize(text: str) -> str:
    return " ".join(text.lower().split())


class MockJudge:
    """Deterministic string judge: exact match is Perfect, containment in
    either direction is Acceptable, anything else is Incorrect."""

    def judge(self, answer: str, ground_truth: str) -> JudgeLabel:
        answer_n = _normalize(answer)
        truth_n = _normalize(ground_truth)
        if not answer_n or not truth_n:
            return JudgeLabel.of(Label.INCORRECT)
        if answer_n == truth_n:
            return JudgeLabel.of(Label.PERFECT)
        if truth_n in answer_n or answer_n in truth_n:
            return JudgeLabel.of(Label.ACCEPTABLE)
        return JudgeLabel.of(Label.INCORRECT)


_DEFAULT_JUDGE_SYSTEM = "You are a strict grader. Respond with exactly one word."
_DEFAULT_JUDGE_USER = (
    "Grade the answer against the reference.\n\n"
    "Reference: {ground_truth}\n\nAnswer: {answer}\n\n"
    "Respond with exactly one of: Perfect, Acceptable, Missing, Incorrect."
)


class PromptedJudge:
    """LLM-backed judge; the grading prompt is supplied by configuration."""

    def __init__(self, backend: ModelBackend, template: Optional[PromptTemplate] = None,
                 timeout_ms: int = 30_000):
        self._backend = backend
        self._template = template or PromptTemplate(
            system=_DEFAULT_JUDGE_SYSTEM, user=_DEFAULT_JUDGE_USER
        )
        self._timeout_ms = timeout_ms

    def judge(self, answer: str, ground_truth: str) -> JudgeLabel:
        system, user = self._template.build(answer=answer, ground_truth=ground_truth)
        request = ModelRequest(
            role=Role.VERIFIER, system=system, user=user, max_tokens=JUDGE_MAX_TOKENS
        )
        try:
            text = self._backend.complete(request, Deadline.after_ms(self._timeout_ms)).text
        except BackendError as exc:
            raise EvalError(f"judge backend failed: {exc}") from exc
        lowered = text.lower()
        for label in Label:
            if label.value.lower() in lowered:
                return JudgeLabel.of(label)
        raise EvalError(f"judge reply carries no label: {text!r}")


def judge_response(
    final_answer: str,
    ground_truth: str,
    judge_backend: JudgeBackend,
    tokenizer: Optional[Tokenizer] = None,
    token_limit: int = DEFAULT_TOKEN_LIMIT,
    abstain_text: str = "I don't know",
) -> JudgeLabel:
    """Label one response; abstentions are Missing without any judge call."""
    if final_answer.strip() == abstain_text:
        return JudgeLabel.of(Label.MISSING)
    return judge_backend.judge(truncate_tokens(final_answer, token_limit, tokenizer), ground_truth)


def aggregate(labels: Sequence[JudgeLabel]) -> MetricsReport:
    """Fold a completed label list into counts, rates, and truthfulness."""
    if not labels:
        raise ValueError("cannot aggregate an empty label list")
    counts = Counter(item.label for item in labels)
    n = len(labels)
    perfect = counts.get(Label.PERFECT, 0)
    acceptable = counts.get(Label.ACCEPTABLE, 0)
    missing = counts.get(Label.MISSING, 0)
    incorrect = counts.get(Label.INCORRECT, 0)
    return MetricsReport(
        n=n,
        counts=dict(counts),
        accuracy=(perfect + acceptable) / n,
        missing_rate=missing / n,
        hallucination_rate=incorrect / n,
        truthfulness=(perfect * 1.0 + acceptable * 0.5 + incorrect * -1.0) / n,
    )


# ---------------------------------------------------------------------------
# Ablation harness

ABLATION_MODES = ("vision_only", "rag_naive", "no_cov_no_sc", "no_cov", "full")


def _ablation_turn(
    mode: str,
    state: ConversationState,
    turn: QueryTurn,
    cfg: PipelineConfig,
    backends: Backends,
    templates: dict[str, PromptTemplate],
) -> str:
    """One turn under a reduced pipeline variant; returns the final answer."""
    clock = _TurnClock(cfg.turn_budget_ms)
    trace = Trace()
    history = tuple(state.history)
    gen_deadline = clock.stage_deadline("generate")
    gen_template = templates["generation"]

    try:
        if mode == "vision_only":
            return generate_direct(
                turn.query, turn.image_ref, backends.vlm, gen_deadline, history, gen_template
            )

        routing = route(
            turn.query, backends.model_for(Role.ROUTER), clock.stage_deadline("route"),
            trace=trace, template=templates["routing"],
        )
        if cfg.mode == "task2plus" and not routing.needs_external:
            context = _empty_context(cfg)
        else:
            context = _run_retrieval(turn, routing, cfg, backends, clock, trace, templates)

        rag_answer = generate_rag(
            turn.query, turn.image_ref, context, backends.vlm, gen_deadline,
            history, gen_template,
        )
        if mode == "rag_naive":
            return rag_answer
        direct_answer = generate_direct(
            turn.query, turn.image_ref, backends.vlm, gen_deadline, history, gen_template
        )
        if mode == "no_cov_no_sc":
            return rag_answer if rag_answer.strip() == direct_answer.strip() else cfg.abstain_text
        # no_cov: dual-path plus the consistency judge, without the verification gate
        pair = check_consistency(
            turn.query, turn.image_ref, context,
            AnswerPair(rag_answer=rag_answer, direct_answer=direct_answer),
            backends.vlm, clock.stage_deadline("consistency"),
            trace=trace, template=templates["consistency"],
        )
        return rag_answer if pair.consistent else cfg.abstain_text
    except BackendError:
        return cfg.abstain_text


def run_ablation(
    mode: str,
    dataset: Sequence[Conversation],
    cfg: PipelineConfig,
    backends: Backends,
    judge: Optional[JudgeBackend] = None,
    tokenizer: Optional[Tokenizer] = None,
) -> MetricsReport:
    """Score one pipeline variant over the dataset with the given judge."""
    if mode not in ABLATION_MODES:
        raise EvalError(f"unknown ablation mode: {mode!r} (choose from {', '.join(ABLATION_MODES)})")
    judge = judge or MockJudge()
    templates = {
        name: resolve_template(name, cfg.prompt_paths)
        for name in ("routing", "summarize", "generation", "consistency", "cov")
    }
    labels: list[JudgeLabel] = []
    for conversation in dataset:
        if mode == "full":
            outcomes = run_conversation(conversation, cfg, backends, templates)
            answers = [outcome.final.answer for outcome in outcomes]
        else:
            state = ConversationState(
                conversation_id=conversation.conversation_id,
                image_ref=conversation.image_ref,
            )
            answers = []
            for turn in conversation.turns:
                answer = _ablation_turn(mode, state, turn, cfg, backends, templates)
                state.history.append((turn.query, answer))
                answers.append(answer)
        for turn, answer in zip(conversation.turns, answers):
            if turn.ground_truth is None:
                raise EvalError(
                    f"{conversation.conversation_id}/{turn.turn_index}: no ground truth"
                )
            labels.append(
                judge_response(
                    answer, turn.ground_truth, judge,
                    tokenizer=tokenizer, abstain_text=cfg.abstain_text,
                )
            )
    return aggregate(labels)
