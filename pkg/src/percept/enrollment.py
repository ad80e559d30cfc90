"""Concept enrollment: fingerprint extraction, embedding, and storage.

The standard path asks the chat model to describe the reference image and
list the distinguishing features; the privileged path takes human-authored
attributes and skips the model entirely.  Either way the record only lands in
the database after every step succeeded, so a failed enrollment leaves the
database untouched.
"""

from __future__ import annotations

import hashlib
import io
import logging
import uuid
from datetime import datetime, timezone
from typing import Callable, Optional, Sequence

from .db import ConceptDatabase, ConceptRecord, ReferenceImage
from .encoders import EncoderGateway
from .errors import DuplicateName, EnrollmentParseFailure, ParseFailure
from .protocol import JSON_REMINDER, parse_enrollment, render_enrollment_prompt
from .vlm import ChatRequest, ImagePayload, VlmGateway

log = logging.getLogger(__name__)

# soft cap on stored fingerprint attributes; longer lists add averaging noise
MAX_ATTRIBUTES = 12

Clock = Callable[[], datetime]


def _utc_now() -> datetime:
    return datetime.now(timezone.utc)


def rfc3339(moment: datetime) -> str:
    if moment.tzinfo is None:
        moment = moment.replace(tzinfo=timezone.utc)
    return moment.isoformat()


def _new_concept_id() -> str:
    return uuid.uuid4().hex


def apply_crop(image_bytes: bytes, box: tuple[int, int, int, int]) -> bytes:
    """Crop to (left, top, right, bottom) and re-encode as PNG."""
    from PIL import Image

    with Image.open(io.BytesIO(image_bytes)) as img:
        cropped = img.crop(box)
        out = io.BytesIO()
        cropped.save(out, format="PNG")
        return out.getvalue()


def _check_new_name(db: ConceptDatabase, name: str) -> None:
    existing = db.get_by_name(name)
    if existing is not None:
        raise DuplicateName(
            f"name {name!r} already enrolled as {existing.concept_id}"
        )


def _build_record(
    *,
    concept_id: Optional[str],
    name: str,
    category: str,
    description: str,
    attributes: Sequence[str],
    image_bytes: bytes,
    encode_bytes: bytes,
    media_type: str,
    image_path: str,
    db: ConceptDatabase,
    encoder: EncoderGateway,
    clock: Clock,
) -> ConceptRecord:
    visual = encoder.encode_image(encode_bytes, media_type)
    # the textual embedding comes from the description, never the attributes
    textual = encoder.encode_text(description)
    db.adopt_encoder(encoder.encoder_id)
    record = ConceptRecord(
        concept_id=concept_id or _new_concept_id(),
        name=name.strip(),
        category=category.strip(),
        description=description.strip(),
        attributes=tuple(attributes),
        visual_embedding=visual,
        textual_embedding=textual,
        reference_image=ReferenceImage(
            path=image_path, sha256=hashlib.sha256(image_bytes).hexdigest()
        ),
        enrolled_at=rfc3339(clock()),
    )
    return db.upsert(record)


def enroll_concept(
    image_bytes: bytes,
    name: str,
    category: str,
    db: ConceptDatabase,
    vlm: VlmGateway,
    encoder: EncoderGateway,
    *,
    media_type: str = "image/png",
    image_path: str = "",
    crop: Optional[tuple[int, int, int, int]] = None,
    max_attributes: int = MAX_ATTRIBUTES,
    concept_id: Optional[str] = None,
    clock: Clock = _utc_now,
) -> ConceptRecord:
    """Enroll via model-extracted fingerprint attributes.

    One chat call on success, two when the first reply needed the re-ask;
    a still-unparseable reply raises EnrollmentParseFailure without storing
    anything.
    """
    if not name.strip():
        raise ValueError("name must be non-empty")
    if not category.strip():
        raise ValueError("category must be non-empty")
    if not image_bytes:
        raise ValueError("image_bytes must be non-empty")
    _check_new_name(db, name)

    prompt = render_enrollment_prompt(category, name)
    request = ChatRequest(
        prompt_text=prompt,
        images=(ImagePayload(data=image_bytes, media_type=media_type),),
        max_tokens=512,
    )
    response = vlm.chat(request)
    try:
        reply = parse_enrollment(response.text)
    except ParseFailure:
        retry = ChatRequest(
            prompt_text=prompt + "\n\n" + JSON_REMINDER,
            images=request.images,
            max_tokens=512,
        )
        response = vlm.chat(retry)
        try:
            reply = parse_enrollment(response.text)
        except ParseFailure as exc:
            raise EnrollmentParseFailure(
                f"enrollment reply unparseable after re-ask: {exc}",
                raw=exc.raw,
                stage=exc.stage,
            ) from exc

    if reply.category.strip().casefold() != category.strip().casefold():
        # user-supplied category is authoritative; the echo is only diagnostic
        log.debug(
            "model category %r differs from user category %r for %r",
            reply.category, category, name,
        )
    attributes = reply.distinct_features
    if len(attributes) > max_attributes:
        log.warning(
            "truncating %d fingerprint attributes to %d for %r",
            len(attributes), max_attributes, name,
        )
        attributes = attributes[:max_attributes]

    encode_bytes = apply_crop(image_bytes, crop) if crop else image_bytes
    return _build_record(
        concept_id=concept_id,
        name=name,
        category=category,
        description=reply.general,
        attributes=attributes,
        image_bytes=image_bytes,
        encode_bytes=encode_bytes,
        media_type=media_type,
        image_path=image_path,
        db=db,
        encoder=encoder,
        clock=clock,
    )


def enroll_with_privileged_attributes(
    image_bytes: bytes,
    name: str,
    category: str,
    attributes: Sequence[str],
    description: str,
    db: ConceptDatabase,
    encoder: EncoderGateway,
    *,
    media_type: str = "image/png",
    image_path: str = "",
    crop: Optional[tuple[int, int, int, int]] = None,
    concept_id: Optional[str] = None,
    clock: Clock = _utc_now,
) -> ConceptRecord:
    """Enroll with human-provided attributes and description; no model call."""
    if not name.strip():
        raise ValueError("name must be non-empty")
    if not category.strip():
        raise ValueError("category must be non-empty")
    if not image_bytes:
        raise ValueError("image_bytes must be non-empty")
    cleaned = tuple(a.strip() for a in attributes if a.strip())
    if not cleaned:
        raise ValueError("attributes must be non-empty")
    if not description.strip():
        raise ValueError("description must be non-empty")
    _check_new_name(db, name)

    encode_bytes = apply_crop(image_bytes, crop) if crop else image_bytes
    return _build_record(
        concept_id=concept_id,
        name=name,
        category=category,
        description=description,
        attributes=cleaned,
        image_bytes=image_bytes,
        encode_bytes=encode_bytes,
        media_type=media_type,
        image_path=image_path,
        db=db,
        encoder=encoder,
        clock=clock,
    )
