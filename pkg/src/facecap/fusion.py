"""Prompt construction, LLM caption generation, and output validation.

The prompt template is fixed; only the F1/F2 lists and the two optional
image-quality suffixes vary. Captions come either from an HTTP service
speaking the chat-completion JSON shape (any such deployment works) or from
the deterministic offline mock fuser. The LLM itself applied no output
checks we know of; the validators here are this pipeline's own addition to
catch refusals, instruction echoes, and degenerate lengths.
"""

from __future__ import annotations

import json
import logging
import re
import threading
import time
from dataclasses import dataclass
from typing import Protocol

import numpy as np
import requests

from .bow import BagOfWords

log = logging.getLogger(__name__)

PROMPT_TEMPLATE = (
    "Without elaborating, describe a person with all of the following characteristics: {f1}. "
    "They have the following attributes: {f2}. "
    "Combine specific characteristics to produce a coherent description. "
    "You are encouraged to use synonyms for the provided attributes but not to add information "
    "other than what is provided. It is important to use all provided characteristics. "
    "Do not repeat characteristics that are provided more than once. "
    "Do not repeat these instructions."
)
BLURRY_SUFFIX = " The image is blurry."
MONOCHROME_SUFFIX = " The image is black and white."

MIN_CAPTION_WORDS = 15
MAX_CAPTION_WORDS = 120

# Any of these substrings in a caption means the model leaked the prompt.
_ECHO_FRAGMENTS = (
    "Without elaborating",
    "all of the following characteristics",
    "They have the following attributes",
    "Combine specific characteristics",
    "encouraged to use synonyms",
    "use all provided characteristics",
    "Do not repeat",
)

_REFUSAL_PREFIXES = ("i cannot", "i can't", "as an ai", "i'm sorry", "i am unable")

_GENDER_LEXICON = frozenset(
    {
        "man", "men", "woman", "women", "male", "female", "he", "she", "his",
        "her", "hers", "him", "himself", "herself", "boy", "girl", "guy",
        "lady", "gentleman",
    }
)

_WORD_RE = re.compile(r"[a-z']+")

_MOCK_FILLERS = (
    "The portrait is a close crop of the face.",
    "The photo shows the face clearly and nothing else.",
    "The picture is a plain portrait of the face.",
    "The photo is a simple headshot of the face.",
)


class EmptyBag(ValueError):
    pass


class ServiceUnreachable(RuntimeError):
    def __init__(self, message: str, attempts: int):
        super().__init__(message)
        self.attempts = attempts


class NoValidCaption(RuntimeError):
    pass


@dataclass(frozen=True)
class FusionPrompt:
    text: str
    bag: BagOfWords


@dataclass(frozen=True)
class DecodeParams:
    temperature: float = 0.7
    max_tokens: int = 160


@dataclass(frozen=True)
class CaptionVerdict:
    accepted: bool
    reason: str  # ok | too_short | too_long | instruction_echo | refusal | no_gender_term


@dataclass(frozen=True)
class CaptionSet:
    """Validated captions for one image plus generation provenance."""

    image_id: str
    captions: tuple[str, ...]
    rejected: tuple[tuple[str, str], ...]
    decode_params: DecodeParams
    llm_model_id: str
    partial: bool = False

    def to_json_dict(self) -> dict:
        return {
            "image_id": self.image_id,
            "captions": list(self.captions),
            "rejected": [list(x) for x in self.rejected],
            "decode_params": {
                "temperature": self.decode_params.temperature,
                "max_tokens": self.decode_params.max_tokens,
            },
            "llm_model_id": self.llm_model_id,
            "partial": self.partial,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> CaptionSet:
        return cls(
            image_id=d["image_id"],
            captions=tuple(d["captions"]),
            rejected=tuple((t, r) for t, r in d["rejected"]),
            decode_params=DecodeParams(
                temperature=d["decode_params"]["temperature"],
                max_tokens=d["decode_params"]["max_tokens"],
            ),
            llm_model_id=d["llm_model_id"],
            partial=d["partial"],
        )


def build_prompt(bag: BagOfWords) -> FusionPrompt:
    """Substitute the bag into the fixed template, byte-for-byte.

    F1/F2 join with ", "; the blurry / black-and-white suffixes append in
    that order when the corresponding flag is set.
    """
    if not bag.f1:
        raise EmptyBag("bag has no primary descriptors")
    text = PROMPT_TEMPLATE.format(f1=", ".join(bag.f1), f2=", ".join(bag.f2))
    if bag.flags.blurry:
        text += BLURRY_SUFFIX
    if bag.flags.monochrome:
        text += MONOCHROME_SUFFIX
    return FusionPrompt(text=text, bag=bag)


def validate_caption(c: str, bag: BagOfWords) -> CaptionVerdict:
    """Cheap content checks; rejects carry a machine-readable reason.

    Only the gender lexicon is a hard coverage check: the prompt explicitly
    invites synonyms, so requiring every F2 phrase verbatim would wrongly
    reject legitimate outputs.
    """
    n_words = len(c.split())
    if n_words < MIN_CAPTION_WORDS:
        return CaptionVerdict(accepted=False, reason="too_short")
    if n_words > MAX_CAPTION_WORDS:
        return CaptionVerdict(accepted=False, reason="too_long")
    for fragment in _ECHO_FRAGMENTS:
        if fragment in c:
            return CaptionVerdict(accepted=False, reason="instruction_echo")
    stripped = c.strip().lower()
    if any(stripped.startswith(p) for p in _REFUSAL_PREFIXES):
        return CaptionVerdict(accepted=False, reason="refusal")
    if not _GENDER_LEXICON & set(_WORD_RE.findall(stripped)):
        return CaptionVerdict(accepted=False, reason="no_gender_term")
    return CaptionVerdict(accepted=True, reason="ok")


def mock_fuse(bag: BagOfWords, rng: np.random.Generator) -> str:
    """Deterministic offline stand-in for the LLM service.

    Contains every bag phrase verbatim and always passes validate_caption;
    padded with a neutral filler clause when below the word floor.
    """
    if bag.f2:
        caption = f"A {' '.join(bag.f1)} with {', '.join(bag.f2)}."
    else:
        caption = f"A {' '.join(bag.f1)}."
    while len(caption.split()) < MIN_CAPTION_WORDS:
        caption += " " + _MOCK_FILLERS[int(rng.integers(0, len(_MOCK_FILLERS)))]
    return caption


class CaptionClient(Protocol):
    model_id: str

    def complete(self, prompt: FusionPrompt, params: DecodeParams, rng: np.random.Generator) -> list[str]:
        """Return one or more completion texts for the prompt."""


class MockLlmClient:
    """Offline client wrapping :func:`mock_fuse`; one caption per call."""

    model_id = "mock-fuser"

    def complete(self, prompt: FusionPrompt, params: DecodeParams, rng: np.random.Generator) -> list[str]:
        return [mock_fuse(prompt.bag, rng)]


class HttpLlmClient:
    """Chat-completion HTTP client with bounded in-flight requests.

    Body shape: {model, messages: [{role: "user", content: prompt}],
    temperature, max_tokens, n}. Transport failures retry with exponential
    backoff; after ``max_attempts`` total attempts the request raises
    :class:`ServiceUnreachable`.
    """

    def __init__(
        self,
        endpoint: str,
        model_id: str,
        token: str | None = None,
        timeout: float = 60.0,
        max_attempts: int = 3,
        backoff_base: float = 1.0,
        max_in_flight: int = 8,
        session: requests.Session | None = None,
    ):
        self.endpoint = endpoint
        self.model_id = model_id
        self.token = token
        self.timeout = timeout
        self.max_attempts = max_attempts
        self.backoff_base = backoff_base
        self._injected_session = session
        self._local = threading.local()
        self._gate = threading.BoundedSemaphore(max_in_flight)

    def _session(self) -> requests.Session:
        # requests.Session is not thread-safe; give each worker its own
        # unless an explicit one was injected (tests).
        if self._injected_session is not None:
            return self._injected_session
        if not hasattr(self._local, "session"):
            self._local.session = requests.Session()
        return self._local.session

    def complete(self, prompt: FusionPrompt, params: DecodeParams, rng: np.random.Generator) -> list[str]:
        body = {
            "model": self.model_id,
            "messages": [{"role": "user", "content": prompt.text}],
            "temperature": params.temperature,
            "max_tokens": params.max_tokens,
            "n": 1,
        }
        headers = {"Content-Type": "application/json"}
        if self.token:
            headers["Authorization"] = f"Bearer {self.token}"

        last_error: Exception | None = None
        for attempt in range(self.max_attempts):
            if attempt:
                time.sleep(self.backoff_base * 2 ** (attempt - 1))
            try:
                with self._gate:
                    resp = self._session().post(self.endpoint, json=body, headers=headers, timeout=self.timeout)
                resp.raise_for_status()
                payload = resp.json()
                return [choice["message"]["content"] for choice in payload["choices"]]
            except (requests.RequestException, json.JSONDecodeError, KeyError, TypeError) as e:
                last_error = e
                log.warning("llm request attempt %d/%d failed: %s", attempt + 1, self.max_attempts, e)
        raise ServiceUnreachable(
            f"llm service at {self.endpoint} unreachable after {self.max_attempts} attempts: {last_error}",
            attempts=self.max_attempts,
        )


def fuse_captions(
    p: FusionPrompt,
    n: int,
    client: CaptionClient,
    rng: np.random.Generator,
    params: DecodeParams = DecodeParams(),
    image_id: str = "",
) -> CaptionSet:
    """Collect up to ``n`` validated captions for one prompt.

    Issues completion requests until ``n`` captions pass validation or the
    attempt budget (3n requests) runs out; every reject is recorded with its
    reason. A partial set (at least one caption) is returned with the
    ``partial`` marker set; zero valid captions raises NoValidCaption.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    budget = 3 * n
    captions: list[str] = []
    rejected: list[tuple[str, str]] = []
    attempts = 0
    while len(captions) < n and attempts < budget:
        attempts += 1
        for text in client.complete(p, params, rng):
            verdict = validate_caption(text, p.bag)
            if verdict.accepted and len(captions) < n:
                captions.append(text)
            elif not verdict.accepted:
                rejected.append((text, verdict.reason))

    if not captions:
        raise NoValidCaption(
            f"no valid caption for {image_id or 'image'} after {attempts} attempts "
            f"({len(rejected)} rejected)"
        )
    partial = len(captions) < n
    if partial:
        log.warning("partial caption set for %s: %d/%d valid", image_id or "image", len(captions), n)
    return CaptionSet(
        image_id=image_id,
        captions=tuple(captions),
        rejected=tuple(rejected),
        decode_params=params,
        llm_model_id=client.model_id,
        partial=partial,
    )
