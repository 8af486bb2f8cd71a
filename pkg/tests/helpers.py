"""Shared builders for synthetic dialogues, datasets, and planted backends."""

from __future__ import annotations

import math
import random

from dialoscope.backend import (
    CompletionRequest,
    CompletionResponse,
    TokenCandidates,
    fixture_entry,
)
from dialoscope.corpus import (
    Dialogue,
    Speaker,
    Turn,
    save_dataset,
    serialize_dialogue,
    split_dataset,
)
from dialoscope.prompting import InContextExample, render_few_shot, render_zero_shot

VOCAB = (
    "book", "flight", "hotel", "train", "taxi", "restaurant", "table",
    "ticket", "time", "price", "city", "review", "movie", "music",
    "weather", "play", "find", "cancel", "change", "confirm",
)


def make_dialogue(
    ident: str,
    gold: int | None = None,
    rng: random.Random | None = None,
    n_turns: int = 2,
) -> Dialogue:
    rng = rng or random.Random(ident)
    turns = []
    for t in range(n_turns):
        speaker = Speaker.USER if t % 2 == 0 else Speaker.SYSTEM
        text = " ".join(rng.choice(VOCAB) for _ in range(rng.randint(3, 8)))
        turns.append(Turn(speaker, text))
    return Dialogue(id=ident, turns=tuple(turns), gold=gold, source="synthetic")


def make_dataset(n: int, seed: int = 0, rated: bool = True) -> list[Dialogue]:
    """n dialogues with deterministic texts; golds cycle through 1..5."""
    rng = random.Random(seed)
    dialogues = []
    for i in range(n):
        gold = (i % 5) + 1 if rated else None
        dialogues.append(make_dialogue(f"d{i:03d}", gold=gold, rng=rng))
    return dialogues


def write_dataset(path, dialogues) -> str:
    save_dataset(dialogues, path)
    return str(path)


class GoldEchoBackend:
    """Fake backend that answers every prompt with the target's gold rating.

    The target dialogue is recovered from the prompt tail: prompts always
    end with the serialized target (after the last blank line), optionally
    followed by the logits score cue.
    """

    backend_id = "gold-echo"

    def __init__(self, dialogues, mode: str = "logits", fail_for: str | None = None):
        self._gold_by_serialization = {serialize_dialogue(d): d.gold for d in dialogues}
        self._id_by_serialization = {serialize_dialogue(d): d.id for d in dialogues}
        self.mode = mode
        self.fail_for = fail_for
        self.requests: list[CompletionRequest] = []

    def _target(self, prompt: str) -> str:
        body = prompt
        if body.endswith("\n\nScore:"):
            body = body[: -len("\n\nScore:")]
        return body[body.rindex("\n\n") + 2 :] if "\n\n" in body else body

    def complete(self, request: CompletionRequest) -> CompletionResponse:
        self.requests.append(request)
        serialized = self._target(request.prompt)
        if self.fail_for is not None and self._id_by_serialization[serialized] == self.fail_for:
            from dialoscope.exceptions import CapabilityError

            raise CapabilityError(f"planted failure for {self.fail_for}")
        gold = self._gold_by_serialization[serialized]
        if self.mode == "logits":
            return CompletionResponse(
                text=f" {gold}",
                token_candidates=(
                    TokenCandidates(position=0, candidates={f" {gold}": math.log(0.9)}),
                ),
                backend_id=self.backend_id,
            )
        return CompletionResponse(
            text=f"Score: {gold}. The request was handled cleanly.",
            token_candidates=(),
            backend_id=self.backend_id,
        )


def zero_shot_logits_fixture(dialogues, test_fraction, split_seed, model, top_k=5):
    """Replay entries answering each zero-shot logits prompt with the gold."""
    split = split_dataset(dialogues, test_fraction, split_seed)
    entries = []
    for target in split.test:
        prompt = render_zero_shot("logits", target)
        request = CompletionRequest(
            prompt=prompt.text, model=model, max_new_tokens=4, top_logprobs=top_k
        )
        entries.append(
            fixture_entry(request, f" {target.gold}", [{f" {target.gold}": math.log(0.9)}])
        )
    return entries


def pairwise_generation_fixture(
    dialogues, test_fraction, split_seed, kind, model, rate_fn
):
    """Replay entries for every 1-shot (train example, test target) prompt.

    rate_fn(target, example) decides the planted rating, so selections made
    by any selector/seed are covered.
    """
    split = split_dataset(dialogues, test_fraction, split_seed)
    pool = [d for d in split.train if d.gold is not None]
    entries = []
    for target in split.test:
        for example in pool:
            prompt = render_few_shot(kind, target, [InContextExample.from_dialogue(example)])
            request = CompletionRequest(
                prompt=prompt.text, model=model, max_new_tokens=512, top_logprobs=0
            )
            rating = rate_fn(target, example)
            entries.append(
                fixture_entry(request, f"Score: {rating}. Grounded in the dialogue flow.")
            )
    return entries
