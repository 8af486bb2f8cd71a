"""Prompt assembly for the three evaluation templates.

Templates live in templates/*.txt with two placeholder markers. The
{examples} block sits at the very top, so a few-shot prompt always ends
with the corresponding zero-shot rendering of the target dialogue and
dropping examples never disturbs the target. Rendering is pure and
thread-safe.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from typing import Sequence

from .corpus import Dialogue, check_likert, serialize_dialogue
from .exceptions import DataError, PromptBudgetError

KIND_LOGITS = "logits"
KIND_RATING_FIRST = "rating_first"
KIND_ANALYSIS_FIRST = "analysis_first"
TEMPLATE_KINDS = (KIND_LOGITS, KIND_RATING_FIRST, KIND_ANALYSIS_FIRST)

EXAMPLES_PLACEHOLDER = "{examples}"
DIALOGUE_PLACEHOLDER = "{dialogue}"


@lru_cache(maxsize=None)
def load_template(kind: str) -> str:
    """Read a template file and validate its placeholder layout."""
    if kind not in TEMPLATE_KINDS:
        raise ValueError(f"unknown template kind {kind!r}; expected one of {TEMPLATE_KINDS}")
    body = (resources.files(__package__) / "templates" / f"{kind}.txt").read_text("utf-8")
    if not body.startswith(EXAMPLES_PLACEHOLDER):
        raise DataError(f"template {kind!r} must start with {EXAMPLES_PLACEHOLDER}")
    if body.count(EXAMPLES_PLACEHOLDER) != 1 or body.count(DIALOGUE_PLACEHOLDER) != 1:
        raise DataError(f"template {kind!r} must contain each placeholder exactly once")
    return body


@dataclass(frozen=True)
class InContextExample:
    """A rated training dialogue usable as a few-shot demonstration."""

    dialogue: Dialogue
    gold: int

    def __post_init__(self) -> None:
        check_likert(self.gold)

    @classmethod
    def from_dialogue(cls, dialogue: Dialogue) -> "InContextExample":
        if dialogue.gold is None:
            raise DataError(f"dialogue {dialogue.id!r} has no gold rating; cannot be an example")
        return cls(dialogue=dialogue, gold=dialogue.gold)


def format_example_block(example: InContextExample) -> str:
    return f"{serialize_dialogue(example.dialogue)}\nScore: {example.gold}\n\n"


@dataclass(frozen=True)
class AssembledPrompt:
    """A rendered prompt plus the pieces needed to refit it to a budget.

    text is example_blocks joined in order followed by base_text (the
    zero-shot rendering of the target); example_ids aligns with
    example_blocks, least-similar example first.
    """

    text: str
    kind: str
    example_ids: tuple[str, ...]
    truncated: bool
    example_blocks: tuple[str, ...]
    base_text: str


def render_zero_shot(kind: str, dialogue: Dialogue) -> AssembledPrompt:
    """Render the template with no examples and the serialized dialogue."""
    template = load_template(kind)
    base = template.replace(EXAMPLES_PLACEHOLDER, "", 1)
    pre, _, post = base.partition(DIALOGUE_PLACEHOLDER)
    text = pre + serialize_dialogue(dialogue) + post
    return AssembledPrompt(
        text=text,
        kind=kind,
        example_ids=(),
        truncated=False,
        example_blocks=(),
        base_text=text,
    )


def render_few_shot(
    kind: str, dialogue: Dialogue, examples: Sequence[InContextExample]
) -> AssembledPrompt:
    """Render examples ahead of the target dialogue.

    examples are given most-similar first (selector order) and rendered
    least-similar first, so the most similar example sits nearest the
    target. An empty sequence degenerates to the zero-shot rendering.
    """
    if not examples:
        return render_zero_shot(kind, dialogue)
    base = render_zero_shot(kind, dialogue)
    rendered = tuple(reversed(examples))
    blocks = tuple(format_example_block(example) for example in rendered)
    return AssembledPrompt(
        text="".join(blocks) + base.text,
        kind=kind,
        example_ids=tuple(example.dialogue.id for example in rendered),
        truncated=False,
        example_blocks=blocks,
        base_text=base.text,
    )


def fit_to_budget(prompt: AssembledPrompt, max_chars: int) -> AssembledPrompt:
    """Drop whole examples, least similar first, until the prompt fits.

    The target dialogue itself is never truncated; a budget below the
    zero-shot rendering is an error. Idempotent.
    """
    if max_chars < len(prompt.base_text):
        raise PromptBudgetError(
            f"budget of {max_chars} chars is below the zero-shot rendering "
            f"({len(prompt.base_text)} chars)"
        )
    if len(prompt.text) <= max_chars:
        return prompt
    blocks = list(prompt.example_blocks)
    ids = list(prompt.example_ids)
    remaining = len(prompt.text)
    while blocks and remaining > max_chars:
        remaining -= len(blocks.pop(0))
        ids.pop(0)
    return AssembledPrompt(
        text="".join(blocks) + prompt.base_text,
        kind=prompt.kind,
        example_ids=tuple(ids),
        truncated=True,
        example_blocks=tuple(blocks),
        base_text=prompt.base_text,
    )
