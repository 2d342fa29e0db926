"""Bundled transfer-pipeline fixture: a neighbor dispute told at length by one party.

A keyword-driven extractive summarizer plays the small model and condenses
the 216-token narration to 53 tokens before a rule-based judge (the large
model) decides who is more at fault.
"""

from __future__ import annotations

import re
from importlib import resources
from pathlib import Path

from ..backends import CostLedger, CostProfile, FunctionBackend, Sample
from ..prompting import PipelineStage, load_pipeline

DISPUTE_DIR = Path(str(resources.files(__package__) / "dispute"))

VIOLENCE = ("kicked", "punched", "hit", "slapped", "shoved")

_SENTENCE = re.compile(r"(?<=[.!?])\s+")
_NARRATOR_VIOLENT = re.compile(r"\bi\b[^.]*\b(?:%s)\b" % "|".join(VIOLENCE))


def extractive_summarizer(keywords):
    keywords = tuple(keywords)

    def summarize(text: str) -> str:
        kept = [s for s in _SENTENCE.split(text.strip()) if any(k in s for k in keywords)]
        return " ".join(kept)

    return summarize


def rule_judge(text: str) -> str:
    """Stand-in adjudicator: whoever resorted to violence is more at fault."""
    if _NARRATOR_VIOLENT.search(text.lower()):
        return "narrator"
    return "other party"


def dispute_sample() -> Sample:
    text = (DISPUTE_DIR / "narration.txt").read_text(encoding="utf-8").strip()
    return Sample("dispute-001", text, gold_label="narrator", category="dispute")


def dispute_backends(ledger: CostLedger | None = None, price_per_input_token: float = 1.0):
    keywords = (DISPUTE_DIR / "keywords.txt").read_text(encoding="utf-8").split()
    return {
        "summarizer": FunctionBackend("summarizer", generate_fn=extractive_summarizer(keywords)),
        "judge": FunctionBackend(
            "judge",
            generate_fn=rule_judge,
            cost_profile=CostProfile(price_per_input_token=price_per_input_token),
            ledger=ledger,
        ),
    }


def dispute_pipeline(ledger: CostLedger | None = None, **kw) -> list[PipelineStage]:
    return load_pipeline(DISPUTE_DIR / "pipeline.json", dispute_backends(ledger, **kw))
