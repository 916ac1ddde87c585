"""VLM transport and reply interpretation.

Backends take (image, prompt) and return the model's raw text; the
classifiers below turn that free text into existence and state verdicts.
Two backends ship here: a scripted mock keyed on (image_id, prompt
substring) and an HTTP client for a remote chat-style endpoint.
"""

from __future__ import annotations

import base64
import io
import re
import time
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Protocol, Sequence

from .core import ImageReadError, ImageRef, ValidationError, iter_jsonl
from ._transport import HttpJsonClient

DEFAULT_MAX_SIDE = 1024
DEFAULT_MOCK_REPLY = "It is unclear"

# Phrases that force an ambiguous verdict even if a backend wraps them
# oddly; extendable by operators for chattier models.
AMBIGUOUS_PHRASES = ("it is unclear", "i cannot tell")

_TOKEN_RE = re.compile(r"[a-z0-9]+")


@dataclass(frozen=True)
class RawReply:
    """Verbatim backend reply; empty text counts as ambiguous downstream."""

    text: str
    latency_ms: int = 0


class ExistenceVerdict(Enum):
    YES = "yes"
    NO = "no"
    AMBIGUOUS = "ambiguous"


class VlmBackend(Protocol):
    def ask(self, image: ImageRef, prompt: str, max_side: int = DEFAULT_MAX_SIDE) -> RawReply:
        ...


# ---------------------------------------------------------------------------
# Reply classification
# ---------------------------------------------------------------------------


def classify_existence(
    reply: RawReply | str, ambiguous_phrases: Sequence[str] = AMBIGUOUS_PHRASES
) -> ExistenceVerdict:
    """Map a free-text reply to Yes/No/Ambiguous.

    The reply is lowercased and stripped; the verdict is Yes or No only when
    the first word is literally "yes" or "no". Everything else, including
    empty text and the configured ambiguity phrases, is Ambiguous.
    """
    text = reply.text if isinstance(reply, RawReply) else reply
    normalized = text.strip().lower()
    for phrase in ambiguous_phrases:
        if phrase in normalized:
            return ExistenceVerdict.AMBIGUOUS
    tokens = _TOKEN_RE.findall(normalized)
    if tokens and tokens[0] == "yes":
        return ExistenceVerdict.YES
    if tokens and tokens[0] == "no":
        return ExistenceVerdict.NO
    return ExistenceVerdict.AMBIGUOUS


def classify_state(reply: RawReply | str, options: Sequence[str]) -> str | None:
    """Pick the state option that occurs earliest in the reply.

    Returns the matching option label, or None (ambiguous) when no option
    occurs or two options first occur at the same index. Matching is
    case-insensitive; the returned label keeps its original spelling.
    """
    if not options:
        raise ValueError("options must be nonempty")
    normalized_options = [option.strip().lower() for option in options]
    if len(set(normalized_options)) != len(normalized_options):
        raise ValueError("options must be pairwise distinct after normalization")
    text = reply.text if isinstance(reply, RawReply) else reply
    normalized = text.strip().lower()
    best_index: int | None = None
    best_option: str | None = None
    tied = False
    for option, needle in zip(options, normalized_options):
        index = normalized.find(needle)
        if index < 0:
            continue
        if best_index is None or index < best_index:
            best_index, best_option, tied = index, option, False
        elif index == best_index:
            tied = True
    if best_index is None or tied:
        return None
    return best_option


# ---------------------------------------------------------------------------
# Scripted mock backend
# ---------------------------------------------------------------------------


class ScriptedVlm:
    """Deterministic mock: replies come from an ordered rule list.

    A rule is ``{"image_id", "prompt_contains", "reply"}``; the first rule
    whose image matches and whose ``prompt_contains`` is a substring of the
    prompt wins. Rules keep file order, and a miss returns the configured
    default reply. ``ask`` is a pure function of (image_id, prompt).
    """

    def __init__(
        self, rules: Iterable[dict[str, Any]], default_reply: str = DEFAULT_MOCK_REPLY
    ) -> None:
        self.default_reply = default_reply
        self._rules_by_image: dict[str, list[tuple[str, str]]] = {}
        for index, rule in enumerate(rules):
            try:
                image_id = rule["image_id"]
                reply = rule["reply"]
            except (TypeError, KeyError) as exc:
                raise ValidationError(f"VLM script rule {index}: missing field") from exc
            needle = rule.get("prompt_contains", "")
            self._rules_by_image.setdefault(image_id, []).append((needle, reply))

    @classmethod
    def from_path(cls, path: str | Path, default_reply: str = DEFAULT_MOCK_REPLY) -> "ScriptedVlm":
        return cls((entry for _, entry in iter_jsonl(path)), default_reply=default_reply)

    def ask(self, image: ImageRef, prompt: str, max_side: int = DEFAULT_MAX_SIDE) -> RawReply:
        for needle, reply in self._rules_by_image.get(image.image_id, ()):
            if needle in prompt:
                return RawReply(text=reply)
        return RawReply(text=self.default_reply)


# ---------------------------------------------------------------------------
# Remote backend
# ---------------------------------------------------------------------------


def read_image_bytes(image: ImageRef) -> bytes:
    try:
        return Path(image.uri).read_bytes()
    except OSError as exc:
        raise ImageReadError(f"{image.image_id}: cannot read {image.uri!r}: {exc}") from exc


def downscale_image(data: bytes, max_side: int) -> bytes:
    """Shrink an encoded image so its longest side is at most ``max_side``,
    preserving aspect ratio. Images already small enough pass through
    untouched."""
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(io.BytesIO(data)) as img:
            width, height = img.size
            longest = max(width, height)
            if longest <= max_side:
                return data
            scale = max_side / longest
            resized = img.convert("RGB").resize(
                (max(1, round(width * scale)), max(1, round(height * scale)))
            )
    except UnidentifiedImageError as exc:
        raise ImageReadError(f"cannot decode image bytes: {exc}") from exc
    buffer = io.BytesIO()
    resized.save(buffer, format="JPEG", quality=90)
    return buffer.getvalue()


class RemoteVlm:
    """HTTP client for a chat-style VLM endpoint.

    Concurrent calls are bounded and rate-limited; transient failures are
    retried with exponential backoff, and quota rejections abort the run.
    """

    def __init__(
        self,
        base_url: str,
        model: str = "default",
        *,
        max_attempts: int = 3,
        max_in_flight: int = 4,
        rate_per_sec: float | None = None,
        timeout: float = 60.0,
        **client_kwargs: Any,
    ) -> None:
        self.model = model
        self._http = HttpJsonClient(
            base_url,
            max_attempts=max_attempts,
            max_in_flight=max_in_flight,
            rate_per_sec=rate_per_sec,
            timeout=timeout,
            **client_kwargs,
        )

    def ask(self, image: ImageRef, prompt: str, max_side: int = DEFAULT_MAX_SIDE) -> RawReply:
        if not prompt:
            raise ValueError("prompt must be nonempty")
        data = downscale_image(read_image_bytes(image), max_side)
        payload = {
            "model": self.model,
            "messages": [
                {
                    "role": "user",
                    "content": [
                        {"type": "image", "data_b64": base64.b64encode(data).decode("ascii")},
                        {"type": "text", "text": prompt},
                    ],
                }
            ],
        }
        started = time.monotonic()
        body = self._http.post_json("/v1/chat", payload)
        elapsed_ms = int((time.monotonic() - started) * 1000)
        if not isinstance(body, dict) or "text" not in body:
            raise ValidationError("VLM response missing 'text' field")
        return RawReply(text=str(body["text"]), latency_ms=elapsed_ms)

    def close(self) -> None:
        self._http.close()
