"""Walk the full recognition pipeline through a hallucination recovery.

The scripted selection call names the wrong concept, claiming the query
shares "red glaze" with it — an attribute the query image embedding does not
support.  The cross-modal check catches the disagreement and the pairwise
image comparison recovers the right concept.  Every number below follows
from the pinned vectors in the fixture.
"""

import json

from percept import (
    ConceptDatabase,
    ConceptRecord,
    EncoderBackendConfig,
    Embedding,
    Gateways,
    MockEncoder,
    PipelineConfig,
    QueryTask,
    ReferenceImage,
    ScriptedTurn,
    ScriptedVlm,
    answer_query,
    infer_concept,
    mock_image_bytes,
)

FIXTURE = {
    "ref-alpha": [1, 0, 0, 0],
    "ref-beta": [0, 1, 0, 0],
    "ref-gamma": [0, 0, 1, 0],
    "a red mug with a round body": [1, 0, 0, 0],
    "a blue mug with a tall handle": [0, 1, 0, 0],
    "a green mug with a square handle": [0, 0, 1, 0],
    "query-photo": [1, 1, 3, 0],          # clearly the green mug
    "red glaze": [1, 0, 0, 0],
    "green glaze": [0, 0, 1, 0],
}

encoder = MockEncoder(
    EncoderBackendConfig(kind="mock", model_id="demo", embedding_dim=4),
    fixture=FIXTURE,
)

references = {}
db = ConceptDatabase()
for cid, name, description, attrs, ref in [
    ("c-alpha", "alpha-mug", "a red mug with a round body",
     ("red glaze", "round body"), "ref-alpha"),
    ("c-beta", "beta-mug", "a blue mug with a tall handle",
     ("blue glaze", "tall handle"), "ref-beta"),
    ("c-gamma", "gamma-mug", "a green mug with a square handle",
     ("green glaze", "square handle"), "ref-gamma"),
]:
    references[f"{ref}.png"] = mock_image_bytes(ref)
    db.upsert(ConceptRecord(
        concept_id=cid, name=name, category="mug", description=description,
        attributes=attrs,
        visual_embedding=encoder.vector_for_label(ref),
        textual_embedding=encoder.vector_for_label(description),
        reference_image=ReferenceImage(path=f"{ref}.png", sha256="0" * 64),
        enrolled_at="2026-01-01T00:00:00+00:00",
    ))

# the scripted replies: the selection hallucinate-picks option B (alpha-mug)
# on a fabricated shared attribute; the pairwise pass says yes only to gamma
vlm = ScriptedVlm([
    ScriptedTurn(
        image_labels=("query-photo",),
        prompt_contains="Which description matches",
        response_text=json.dumps({
            "A": "green glaze", "B": "red glaze", "C": "None",
            "Reasoning": "The mug seems to have a red glaze.",
            "Answer": "B",
        }),
    ),
    *[
        ScriptedTurn(
            image_labels=("query-photo", ref),
            prompt_contains="Can you see",
            response_text=json.dumps({"Reasoning": "compared", "Answer": ans}),
            yes_logit=2.0 if ans == "yes" else -1.0,
            no_logit=-1.0 if ans == "yes" else 2.0,
        )
        for ref, ans in [("ref-alpha", "no"), ("ref-beta", "no"),
                         ("ref-gamma", "yes")]
    ],
    ScriptedTurn(
        image_labels=("query-photo",),
        prompt_contains="The main subject is gamma-mug",
        response_text="gamma-mug sits on the counter in bright light.",
    ),
])

gateways = Gateways(
    vlm=vlm, encoder=encoder,
    load_reference=lambda ref: references[ref.path],
)

trace = infer_concept(mock_image_bytes("query-photo"), db, gateways,
                      PipelineConfig())

names = {r.concept_id: r.name for r in db.snapshot()}
print("== retrieval ==")
for rank, entry in enumerate(trace.candidate_set.entries, start=1):
    print(f"  {rank}. {names[entry.concept_id]:10s} fused={entry.fused:+.3f}")

print()
print("== attribute-focused selection ==")
print(f"  model chose: {names[trace.c_tilde]!r}")
print(f"  claimed shared attributes: "
      f"{ {k: list(v) for k, v in trace.cot_verdict.matched_attributes.items()} }")

print()
print("== cross-modal attribute verification ==")
for cid, score in trace.attribute_scores.items():
    shown = "-inf (no shared attributes)" if score == float("-inf") else f"{score:+.3f}"
    print(f"  {names[cid]:10s} {shown}")
print(f"  attribute check prefers: {names[trace.c_tilde_a]!r}")
print(f"  verification passed: {trace.verification_passed}")

print()
print("== pairwise image comparison (triggered by the disagreement) ==")
for cid, p in trace.pairwise_probs.items():
    print(f"  P(present | {names[cid]}) = {p:.3f}")
print(f"  final concept: {names[trace.final]!r} "
      f"({trace.vlm_calls} chat calls total)")

print()
print("== personalized caption for the recovered concept ==")
answer = answer_query(mock_image_bytes("query-photo"), QueryTask.caption(),
                      db, gateways)
print(f"  {answer.text}")
