"""Prompt templates shipped as package resources."""

import logging
from enum import StrEnum
from functools import cache
from importlib import resources

logger = logging.getLogger(__name__)


class PromptName(StrEnum):
    PLANNER = "planner"
    REWRITE = "rewrite"
    SELECT = "select"
    EVALUATE = "evaluate"
    SYNTHESIS = "synthesis"
    EXTRACTION = "extraction"
    JUDGE_LR1 = "judge_lr1"
    JUDGE_LR2 = "judge_lr2"
    DIFFICULTY = "difficulty"


@cache
def load_template(name: PromptName) -> str:
    """Read a template from ``propgraph/prompts/<name>.txt``."""
    return resources.files("propgraph").joinpath("prompts", f"{name}.txt").read_text(encoding="utf-8")


def render(name: PromptName, **values: str) -> str:
    """Fill ``{placeholder}`` slots of a template.

    Plain substitution is used instead of ``str.format`` because templates
    contain literal braces and brackets.

    Raises:
        KeyError: If a value is given for a placeholder the template lacks
    """
    text = load_template(name)
    for key, value in values.items():
        slot = "{" + key + "}"
        if slot not in text:
            raise KeyError(f"template '{name}' has no placeholder {slot}")
        text = text.replace(slot, value)
    return text
