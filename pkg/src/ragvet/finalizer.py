"""Rule-based answer finalization: return the grounded answer or abstain.

The guards run in strict order and exactly one fires. The direct answer is
never returned; the only outputs are the grounded answer and the abstention
string. The last two abstention arms behave identically but stay distinct
in the branch enum so traces show which guard fired.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

from .core import PipelineConfig

__all__ = ["Branch", "FinalDecision", "finalize"]


class Branch(str, Enum):
    REAL_TIME_LOW_RETRIEVAL = "RealTimeLowRetrieval"
    CONSISTENT_WITH_CONTEXT = "ConsistentWithContext"
    CONSISTENT_NO_CONTEXT = "ConsistentNoContext"
    INCONSISTENT_WITH_CONTEXT = "InconsistentWithContext"
    DEFAULT_ABSTAIN = "DefaultAbstain"


_ACCEPT_BRANCHES = frozenset(
    {Branch.CONSISTENT_WITH_CONTEXT, Branch.CONSISTENT_NO_CONTEXT}
)


@dataclass(frozen=True)
class FinalDecision:
    answer: str
    branch: Branch
    abstained: bool

    def __post_init__(self) -> None:
        if self.abstained == (self.branch in _ACCEPT_BRANCHES):
            raise ValueError("abstained flag contradicts the branch that fired")

    def to_dict(self) -> dict:
        return {
            "answer": self.answer,
            "branch": self.branch.value,
            "abstained": self.abstained,
        }


def finalize(
    is_real_time: bool,
    s_ret: float,
    context_empty: bool,
    consistent: bool,
    s_cov: float,
    rag_answer: str,
    cfg: PipelineConfig,
) -> FinalDecision:
    """Apply the acceptance rules in order; total over s_ret, s_cov in [0, 1]."""

    def abstain(branch: Branch) -> FinalDecision:
        return FinalDecision(answer=cfg.abstain_text, branch=branch, abstained=True)

    def accept(branch: Branch) -> FinalDecision:
        return FinalDecision(answer=rag_answer, branch=branch, abstained=False)

    if is_real_time and s_ret < cfg.min_retrieval_score:
        return abstain(Branch.REAL_TIME_LOW_RETRIEVAL)
    if not context_empty and consistent and s_cov >= cfg.low_confidence:
        return accept(Branch.CONSISTENT_WITH_CONTEXT)
    if context_empty and consistent and s_cov >= cfg.high_confidence:
        return accept(Branch.CONSISTENT_NO_CONTEXT)
    if not context_empty and not consistent:
        return abstain(Branch.INCONSISTENT_WITH_CONTEXT)
    return abstain(Branch.DEFAULT_ABSTAIN)
