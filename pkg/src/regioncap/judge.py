"""Binary judge protocol for attribute-aware region captions.

A fixed evaluator prompt (kept byte-stable and regression-tested against a
golden file) asks an external chat-completion judge whether a predicted
attribute description is reasonable, given the image with the masked region,
the prediction, and a reference. Transport is abstracted behind a one-method
client so the whole protocol runs offline against the in-process mock; the
HTTPS client reads its key from the ``JUDGE_API_KEY`` environment variable.

The judge sees the original image with the region rendered as a
semi-transparent overlay (one defensible choice among several; the protocol
itself is agnostic to the rendering).
"""

from __future__ import annotations

import base64
import io
import os
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Protocol

import numpy as np
from PIL import Image

from .geometry import BinaryMask, resize_mask

JUDGE_PROMPT = """Evaluator Instructions:
You are an evaluator tasked with assessing the reasonableness of a model-generated caption for a specific attribute in a masked region of an image.

You will be provided with:
An image with a masked region (region of interest).
A model-predicted caption.
A reference description.

Important Notes:
The model's prediction does not need to exactly match the reference; it is acceptable as long as it reasonably describes the region and the attribute.
The reference description serves as a suggestion or one possible answer, not an exact target.
This is an open-ended generation task.
Example: If the attribute relates to a person's age, and the prediction is "40-50 years old" while the reference is "45-50 years old," the prediction is considered reasonable.

Your Task:
Determine if the caption accurately and reasonably describes the expected attribute of the region of interest.
Provide a binary answer ("Yes" or "No") based solely on whether the attribute description is reasonable.
Please return "Yes" or "No" only, without any additional information.
Please carefully examine all compositional details within the mask region!!
"""


class TransportError(RuntimeError):
    """The judge service could not be reached; the request may be retried."""


class UnparseableVerdictError(ValueError):
    """The judge reply contains neither a leading Yes nor No."""


@dataclass(frozen=True)
class JudgeRequest:
    """One evaluation item; ``image`` is a file path or raw PNG bytes."""

    sample_id: str
    image: str | bytes
    prediction: str
    reference: str
    attribute: str

    def __post_init__(self):
        for name in ("sample_id", "prediction", "reference", "attribute"):
            if not getattr(self, name):
                raise ValueError(f"judge request field {name!r} must be non-empty")
        if not self.image:
            raise ValueError("judge request needs an image reference")


@dataclass
class Verdict:
    sample_id: str
    decision: str | None  # "Yes" | "No" | None when unparseable/unsent
    raw_response: str | None
    retries: int = 0
    error: str | None = None

    def to_json_obj(self) -> dict:
        return {
            "id": self.sample_id,
            "decision": self.decision,
            "raw_response": self.raw_response,
            "retries": self.retries,
            "error": self.error,
        }


def build_judge_prompt(req: JudgeRequest) -> str:
    """The fixed evaluator instructions followed by the filled-in fields."""
    return (
        f"{JUDGE_PROMPT}\n"
        f"Attribute:\n{req.attribute}\n\n"
        f"Model Prediction:\n{req.prediction}\n\n"
        f"Reference Description:\n{req.reference}\n"
    )


_VERDICT_RE = re.compile(r"^[^a-zA-Z]*(yes|no)(?![a-zA-Z])", re.IGNORECASE)


def parse_verdict(response: str) -> str:
    """Case-insensitive leading Yes/No, tolerating surrounding punctuation."""
    m = _VERDICT_RE.match(response or "")
    if not m:
        raise UnparseableVerdictError(f"no Yes/No verdict in {response!r}")
    return "Yes" if m.group(1).lower() == "yes" else "No"


class JudgeClient(Protocol):
    def send(self, prompt: str, image: bytes | None) -> str: ...


class MockJudgeClient:
    """Scripted in-process judge. Each ``send`` consumes the next script
    entry (a reply string, or an exception instance to raise); the client
    also records how many requests were in flight at once.
    """

    def __init__(self, script, hold_s: float = 0.0):
        self.script = list(script)
        self.hold_s = hold_s
        self.calls = 0
        self.in_flight = 0
        self.max_in_flight = 0
        self._lock = threading.Lock()

    def send(self, prompt: str, image: bytes | None) -> str:
        with self._lock:
            if not self.script:
                raise RuntimeError("mock judge script exhausted")
            outcome = self.script.pop(0)
            self.calls += 1
            self.in_flight += 1
            self.max_in_flight = max(self.max_in_flight, self.in_flight)
        try:
            if self.hold_s:
                time.sleep(self.hold_s)
            if isinstance(outcome, BaseException):
                raise outcome
            return outcome
        finally:
            with self._lock:
                self.in_flight -= 1


class HttpJudgeClient:
    """Chat-completion HTTPS client (OpenAI-style message schema).

    The endpoint URL and model name come from configuration; credentials
    from the JUDGE_API_KEY environment variable, never from files.
    """

    def __init__(self, endpoint: str, model: str, timeout_s: float = 60.0):
        self.endpoint = endpoint
        self.model = model
        self.timeout_s = timeout_s

    def send(self, prompt: str, image: bytes | None) -> str:
        import requests

        content: list[dict] = [{"type": "text", "text": prompt}]
        if image is not None:
            b64 = base64.b64encode(image).decode()
            content.append({
                "type": "image_url",
                "image_url": {"url": f"data:image/png;base64,{b64}"},
            })
        headers = {"Content-Type": "application/json"}
        key = os.environ.get("JUDGE_API_KEY")
        if key:
            headers["Authorization"] = f"Bearer {key}"
        try:
            resp = requests.post(
                self.endpoint,
                json={"model": self.model,
                      "messages": [{"role": "user", "content": content}]},
                headers=headers,
                timeout=self.timeout_s,
            )
        except requests.RequestException as exc:
            raise TransportError(str(exc)) from exc
        if resp.status_code != 200:
            raise TransportError(f"judge endpoint returned {resp.status_code}")
        try:
            return resp.json()["choices"][0]["message"]["content"]
        except (KeyError, IndexError, ValueError) as exc:
            raise TransportError(f"malformed judge response: {exc}") from exc


def render_judge_image(image_path, mask: BinaryMask | None,
                       alpha: float = 0.5,
                       color: tuple[int, int, int] = (255, 0, 0)) -> bytes:
    """PNG bytes of the image with the mask blended in as a translucent
    overlay (the rendering sent to the judge alongside the prompt)."""
    with Image.open(image_path) as im:
        rgb = np.asarray(im.convert("RGB"), dtype=np.float64)
    if mask is not None:
        m = resize_mask(mask, rgb.shape[0], rgb.shape[1]).pixels.astype(bool)
        overlay = np.array(color, dtype=np.float64)
        rgb[m] = (1 - alpha) * rgb[m] + alpha * overlay
    buf = io.BytesIO()
    Image.fromarray(rgb.astype(np.uint8), mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


@dataclass
class JudgeRunResult:
    verdicts: list[Verdict]
    accuracy: float | None
    parsed: int
    unparsed: int
    transport_failures: int

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "parsed": self.parsed,
            "unparsed": self.unparsed,
            "transport_failures": self.transport_failures,
            "n": len(self.verdicts),
        }


def judge_run(requests_: list[JudgeRequest], client: JudgeClient,
              concurrency: int = 4, retries: int = 2) -> JudgeRunResult:
    """Fan the requests out with bounded parallelism and deterministic,
    input-ordered results.

    Accuracy counts Yes verdicts over *parsed* verdicts only; unparsed and
    unsent samples are flagged in their verdict records, never dropped.
    """

    def image_bytes(req: JudgeRequest) -> bytes:
        if isinstance(req.image, bytes):
            return req.image
        with open(req.image, "rb") as fh:
            return fh.read()

    def worker(req: JudgeRequest) -> Verdict:
        prompt = build_judge_prompt(req)
        attempts = 0
        while True:
            try:
                reply = client.send(prompt, image_bytes(req))
                break
            except TransportError as exc:
                attempts += 1
                if attempts > retries:
                    return Verdict(req.sample_id, None, None, retries=attempts - 1,
                                   error=f"transport: {exc}")
        try:
            decision = parse_verdict(reply)
        except UnparseableVerdictError as exc:
            return Verdict(req.sample_id, None, reply, retries=attempts,
                           error=f"unparseable: {exc}")
        return Verdict(req.sample_id, decision, reply, retries=attempts)

    if concurrency < 1:
        raise ValueError("concurrency must be >= 1")
    if not requests_:
        return JudgeRunResult([], None, 0, 0, 0)
    with ThreadPoolExecutor(max_workers=concurrency) as pool:
        verdicts = list(pool.map(worker, requests_))

    parsed = [v for v in verdicts if v.decision is not None]
    yes = sum(1 for v in parsed if v.decision == "Yes")
    transport_failures = sum(1 for v in verdicts if v.error and v.error.startswith("transport"))
    unparsed = sum(1 for v in verdicts if v.error and v.error.startswith("unparseable"))
    accuracy = yes / len(parsed) if parsed else None
    return JudgeRunResult(verdicts, accuracy, len(parsed), unparsed, transport_failures)
