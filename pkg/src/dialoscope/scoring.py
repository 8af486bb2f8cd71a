"""Turning backend responses into ratings.

Logits route: candidate-token log-probabilities at the score position are
exponentiated, matched against the rating vocabulary, and combined into a
probability-weighted average rating. Generation route: free text is
scanned for a 1-5 score near a cue word. Parse failures are recorded, not
imputed.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import TYPE_CHECKING, Mapping, Sequence

from .corpus import LIKERT_MAX, LIKERT_MIN, check_likert
from .exceptions import DataError, DialoscopeError

if TYPE_CHECKING:
    from .backend import TokenCandidates

METHOD_LOGITS = "logits"
METHOD_RATING_FIRST = "rating_first"
METHOD_ANALYSIS_FIRST = "analysis_first"
GENERATION_METHODS = (METHOD_RATING_FIRST, METHOD_ANALYSIS_FIRST)

DEFAULT_TOP_K = 5
CUE_WINDOW_CHARS = 40

_CUE_RE = re.compile(r"\b(score|rating|rate)\b", re.IGNORECASE)
_DIGIT_RE = re.compile(r"(?<!\d)[1-5](?!\d)")


class RatingExtractionError(DialoscopeError):
    """No candidate token matched any rating surface form."""


class RatingVocabulary:
    """Acceptable token surface forms per rating value.

    Tokens are matched after trimming surrounding whitespace, so the
    default forms ("1" and " 1") collapse onto one rating.
    """

    def __init__(self, forms: Mapping[int, Sequence[str]]):
        lookup: dict[str, int] = {}
        for rating, surfaces in forms.items():
            check_likert(rating)
            for surface in surfaces:
                stripped = surface.strip()
                if not stripped:
                    raise DataError(f"rating {rating}: blank surface form {surface!r}")
                if lookup.get(stripped, rating) != rating:
                    raise DataError(
                        f"surface form {stripped!r} maps to both rating "
                        f"{lookup[stripped]} and {rating}"
                    )
                lookup[stripped] = rating
        self._lookup = lookup

    @classmethod
    def from_dict(cls, raw: Mapping[str, Sequence[str]]) -> "RatingVocabulary":
        return cls({int(rating): list(surfaces) for rating, surfaces in raw.items()})

    def match(self, token: str) -> int | None:
        return self._lookup.get(token.strip())


DEFAULT_VOCABULARY = RatingVocabulary(
    {rating: (str(rating), f" {rating}") for rating in range(LIKERT_MIN, LIKERT_MAX + 1)}
)


@dataclass(frozen=True)
class RatingDistribution:
    """Top-K candidate ratings with probabilities, highest probability first."""

    entries: tuple[tuple[int, float], ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "entries", tuple(self.entries))
        if not self.entries:
            raise DataError("rating distribution must be non-empty")
        seen: set[int] = set()
        for rating, probability in self.entries:
            check_likert(rating)
            if rating in seen:
                raise DataError(f"duplicate rating {rating} in distribution")
            seen.add(rating)
            if not math.isfinite(probability) or probability <= 0.0:
                raise DataError(f"rating {rating}: probability must be finite and > 0")
            if probability > 1.0 + 1e-6:
                raise DataError(f"rating {rating}: probability {probability} exceeds 1")

    @property
    def k(self) -> int:
        return len(self.entries)


def extract_rating_distribution(
    candidates: "TokenCandidates",
    vocabulary: RatingVocabulary = DEFAULT_VOCABULARY,
    top_k: int = DEFAULT_TOP_K,
) -> RatingDistribution:
    """Match candidate tokens to ratings and keep the top_k most probable.

    Probabilities of surface forms mapping to one rating are summed;
    probability ties are broken toward the smaller rating value.
    """
    if not 1 <= top_k <= 5:
        raise ValueError(f"top_k must be in 1..5, got {top_k}")
    merged: dict[int, float] = {}
    for token, logprob in candidates.candidates.items():
        rating = vocabulary.match(token)
        if rating is None:
            continue
        merged[rating] = merged.get(rating, 0.0) + math.exp(logprob)
    if not merged:
        raise RatingExtractionError(
            f"no rating token among candidates {sorted(candidates.candidates)!r}"
        )
    ranked = sorted(merged.items(), key=lambda item: (-item[1], item[0]))
    return RatingDistribution(entries=tuple(ranked[:top_k]))


def compute_weights(distribution: RatingDistribution) -> tuple[float, ...]:
    """Normalize the distribution's probabilities: w_i = p_i / sum(p)."""
    total = sum(probability for _, probability in distribution.entries)
    return tuple(probability / total for _, probability in distribution.entries)


def weighted_rating(distribution: RatingDistribution) -> float:
    """Probability-weighted average rating: sum of r_i * w_i."""
    weights = compute_weights(distribution)
    return sum(
        rating * weight
        for (rating, _), weight in zip(distribution.entries, weights)
    )


def round_to_likert(value: float) -> int:
    """Round-half-up a continuous rating to the nearest integer in 1..5."""
    if not LIKERT_MIN <= value <= LIKERT_MAX:
        raise DataError(f"continuous rating {value} outside [1, 5]")
    return int(math.floor(value + 0.5))


@dataclass(frozen=True)
class ParsedRating:
    rating: int
    analysis: str | None


def parse_generated_rating(text: str, kind: str) -> ParsedRating | None:
    """Extract a 1-5 score from generated text, or None on parse failure.

    Takes the first standalone digit 1-5 within 40 characters after a cue
    word (score / rating / rate, case-insensitive); falls back to the first
    standalone digit anywhere. For analysis_first the analysis is the text
    before the matched score, for rating_first the text after it.
    """
    if kind not in GENERATION_METHODS:
        raise ValueError(f"kind must be one of {GENERATION_METHODS}, got {kind!r}")
    prefix_end: int | None = None
    digit_match = None
    for cue in _CUE_RE.finditer(text):
        found = _DIGIT_RE.search(text, cue.end())
        if found and found.start() - cue.end() <= CUE_WINDOW_CHARS:
            prefix_end = cue.start()
            digit_match = (found.start(), found.end())
            break
    if digit_match is None:
        found = _DIGIT_RE.search(text)
        if found is None:
            return None
        prefix_end = found.start()
        digit_match = (found.start(), found.end())
    rating = int(text[digit_match[0] : digit_match[1]])
    if kind == METHOD_ANALYSIS_FIRST:
        analysis = text[:prefix_end].rstrip()
    else:
        analysis = text[digit_match[1] :].lstrip()
    return ParsedRating(rating=rating, analysis=analysis or None)


@dataclass(frozen=True)
class ScoredDialogue:
    """Rating assigned to one dialogue by one method.

    The logits method carries the continuous weighted rating plus its
    rounded Likert value; generation methods carry the parsed Likert value
    and any analysis text. likert is absent whenever parsing failed.
    """

    dialogue_id: str
    method: str
    continuous_rating: float | None = None
    likert: int | None = None
    analysis_text: str | None = None
    parse_ok: bool = True

    def __post_init__(self) -> None:
        if self.method not in (METHOD_LOGITS, *GENERATION_METHODS):
            raise DataError(f"unknown scoring method {self.method!r}")
        if not self.parse_ok:
            if self.likert is not None or self.continuous_rating is not None:
                raise DataError("failed parses must not carry ratings")
            return
        if self.method == METHOD_LOGITS:
            if self.continuous_rating is None:
                raise DataError("logits scoring requires a continuous rating")
            if self.likert != round_to_likert(self.continuous_rating):
                raise DataError("likert must be the rounded continuous rating")
        else:
            if self.continuous_rating is not None:
                raise DataError("generation scoring carries no continuous rating")
            if self.likert is None:
                raise DataError("successful parses must carry a likert rating")
            check_likert(self.likert)


def score_logits(
    dialogue_id: str,
    candidates: "TokenCandidates",
    vocabulary: RatingVocabulary = DEFAULT_VOCABULARY,
    top_k: int = DEFAULT_TOP_K,
) -> ScoredDialogue:
    """Score one dialogue from the rating-position token candidates."""
    try:
        distribution = extract_rating_distribution(candidates, vocabulary, top_k)
    except RatingExtractionError:
        return ScoredDialogue(dialogue_id=dialogue_id, method=METHOD_LOGITS, parse_ok=False)
    rating = weighted_rating(distribution)
    return ScoredDialogue(
        dialogue_id=dialogue_id,
        method=METHOD_LOGITS,
        continuous_rating=rating,
        likert=round_to_likert(rating),
    )


def score_generation(dialogue_id: str, text: str, kind: str) -> ScoredDialogue:
    """Score one dialogue from generated text."""
    parsed = parse_generated_rating(text, kind)
    if parsed is None:
        return ScoredDialogue(dialogue_id=dialogue_id, method=kind, parse_ok=False)
    return ScoredDialogue(
        dialogue_id=dialogue_id,
        method=kind,
        likert=parsed.rating,
        analysis_text=parsed.analysis,
    )
