"""Compare the four retrieval modes on a small database with pinned vectors.

The mock encoder's fixture pins every embedding, so the cosine scores below
are exact and easy to follow: each concept's image embedding sits on its own
axis, and the query leans toward "red mug" visually but toward "blue mug"
textually — which is exactly the case where fusing the two signals helps.
"""

import numpy as np

from percept import (
    ConceptDatabase,
    ConceptRecord,
    EncoderBackendConfig,
    Embedding,
    MockEncoder,
    ReferenceImage,
    RetrievalMode,
    FUSED, IMAGE_ONLY, TEXT_ONLY,
    hit_at_k,
    retrieve,
)

FIXTURE = {
    "img-red": [1, 0, 0, 0],
    "img-blue": [0, 1, 0, 0],
    "img-green": [0, 0, 1, 0],
    "a red mug": [0, 1, 0, 0],      # descriptions deliberately "swapped":
    "a blue mug": [1, 0, 0, 0],     # text points at the other concept
    "a green mug": [0, 0, 1, 0],
    # visually red-leaning, textually blue-leaning
    "query": [3, 2, 0.5, 0],
}

encoder = MockEncoder(
    EncoderBackendConfig(kind="mock", model_id="demo", embedding_dim=4),
    fixture=FIXTURE,
)

db = ConceptDatabase()
for cid, name, img_label, description in [
    ("c-red", "red-mug", "img-red", "a red mug"),
    ("c-blue", "blue-mug", "img-blue", "a blue mug"),
    ("c-green", "green-mug", "img-green", "a green mug"),
]:
    db.upsert(ConceptRecord(
        concept_id=cid, name=name, category="mug", description=description,
        attributes=("demo",),
        visual_embedding=encoder.vector_for_label(img_label),
        textual_embedding=encoder.vector_for_label(description),
        reference_image=ReferenceImage(path=f"{img_label}.png", sha256="0" * 64),
        enrolled_at="2026-01-01T00:00:00+00:00",
    ))

query = encoder.vector_for_label("query")
snapshot = db.snapshot()

for mode in (FUSED, IMAGE_ONLY, TEXT_ONLY, RetrievalMode.two_step(3)):
    result = retrieve(query, snapshot, k=2, mode=mode)
    label = mode.kind if mode.rerank_pool is None else \
        f"{mode.kind}(pool={mode.rerank_pool})"
    print(f"== {label} ==")
    for rank, entry in enumerate(result.entries, start=1):
        print(f"  {rank}. {entry.concept_id}  "
              f"s_vv={entry.s_vv:+.3f}  s_vt={entry.s_vt:+.3f}  "
              f"fused={entry.fused:+.3f}")
    print(f"  HIT@2 for c-red: {hit_at_k(result, 'c-red')}")
    print()

print("image_only trusts the visual signal (red first), text_only trusts the")
print("swapped descriptions (blue first); the fused score balances the two.")
