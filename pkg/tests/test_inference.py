"""Pipeline orchestration: gating, verification strategies, and traces.

Scenarios pin every embedding through the encoder fixture and script every
chat reply, so each outcome below is forced by construction: retrieval ranks
follow the pinned cosines, and the selection/pairwise answers are canned.
"""

from __future__ import annotations

import json
import math

import pytest

from percept.db import ConceptDatabase
from percept.encoders import EncoderBackendConfig, MockEncoder, mock_image_bytes
from percept.errors import EmptyDatabase, UnknownTargetConcept
from percept.inference import (
    Gateways,
    PipelineConfig,
    QueryTask,
    answer_query,
    attribute_verify,
    cot_select,
    infer_concept,
    pairwise_refine,
)
from percept.retrieval import retrieve
from percept.vlm import ScriptedTurn, ScriptedVlm

from conftest import make_record, unit

DIM = 4
E = [unit([1, 0, 0, 0]), unit([0, 1, 0, 0]), unit([0, 0, 1, 0]), unit([0, 0, 0, 1])]

# query leaning towards alpha: cos(alpha)=3/sqrt(11), cos(beta)=cos(gamma)=1/sqrt(11)
Q_ALPHA = [3.0, 1.0, 1.0, 0.0]
# query leaning towards gamma
Q_GAMMA = [1.0, 1.0, 3.0, 0.0]

FIXTURE = {
    "ref-alpha": [1, 0, 0, 0],
    "ref-beta": [0, 1, 0, 0],
    "ref-gamma": [0, 0, 1, 0],
    "a red mug with a round body": [1, 0, 0, 0],
    "a blue mug with a tall handle": [0, 1, 0, 0],
    "a green mug with a square handle": [0, 0, 1, 0],
    "q-alpha": Q_ALPHA,
    "q-gamma": Q_GAMMA,
    "red glaze": [1, 0, 0, 0],
    "blue glaze": [0, 1, 0, 0],
    "green glaze": [0, 0, 1, 0],
    "round body": [1, 1, 0, 0],
}

CONCEPTS = [
    ("c-alpha", "alpha-mug", "a red mug with a round body",
     ("red glaze", "round body"), "ref-alpha"),
    ("c-beta", "beta-mug", "a blue mug with a tall handle",
     ("blue glaze", "tall handle"), "ref-beta"),
    ("c-gamma", "gamma-mug", "a green mug with a square handle",
     ("green glaze", "square handle"), "ref-gamma"),
]


def cot_reply(answer: str, **attrs) -> str:
    body = {letter: attrs.get(letter, "None") for letter in ("A", "B", "C")}
    body["Reasoning"] = "scripted"
    body["Answer"] = answer
    return json.dumps(body)


def pairwise_turn(query_label: str, ref_label: str, yes: bool) -> ScriptedTurn:
    return ScriptedTurn(
        image_labels=(query_label, ref_label),
        prompt_contains="Can you see",
        response_text=json.dumps(
            {"Reasoning": "scripted", "Answer": "yes" if yes else "no"}
        ),
        yes_logit=1.0 if yes else -2.0,
        no_logit=-2.0 if yes else 1.0,
    )


def build_scenario(turns) -> tuple[ConceptDatabase, Gateways]:
    db = ConceptDatabase()
    references = {}
    for cid, name, description, attrs, ref_label in CONCEPTS:
        encoder = _encoder()
        references[f"img/{ref_label}"] = mock_image_bytes(ref_label)
        db.upsert(
            make_record(
                cid, name,
                visual=encoder.vector_for_label(ref_label),
                textual=encoder.vector_for_label(description),
                description=description,
                attributes=attrs,
                ref_path=f"img/{ref_label}",
            )
        )
    gateways = Gateways(
        vlm=ScriptedVlm(turns),
        encoder=_encoder(),
        load_reference=lambda ref: references[ref.path],
    )
    return db, gateways


def _encoder() -> MockEncoder:
    config = EncoderBackendConfig(
        kind="mock", model_id="scenario", embedding_dim=DIM
    )
    return MockEncoder(config, fixture=FIXTURE)


def query_image(label: str) -> bytes:
    return mock_image_bytes(label)


def cot_turn(query_label: str, reply: str) -> ScriptedTurn:
    return ScriptedTurn(
        image_labels=(query_label,),
        prompt_contains="Which description matches",
        response_text=reply,
    )


class TestAttributeVerify:
    def test_mean_of_hand_set_cosines(self, mock_encoder):
        # attribute vectors chosen so cosines to the query are 0.4 and 0.6
        encoder = mock_encoder(dim=2, fixture={
            "attr-a": [0.4, math.sqrt(1 - 0.16)],
            "attr-b": [0.6, 0.8],
        })
        query = unit([1.0, 0.0])
        scores, best = attribute_verify(
            query, {"c1": ("attr-a", "attr-b")}, encoder
        )
        assert scores["c1"] == pytest.approx(0.5, abs=1e-12)
        assert best == "c1"

    def test_empty_candidates_excluded_from_argmax(self, mock_encoder):
        encoder = mock_encoder(dim=2, fixture={
            "strong": [1.0, 0.0], "weak": [0.0, 1.0],
        })
        query = unit([1.0, 0.0])
        scores, best = attribute_verify(
            query,
            {"a": ("strong",), "b": ("weak",), "c": ()},
            encoder,
        )
        assert best == "a"
        assert scores["c"] == -math.inf

    def test_all_empty_is_inconclusive(self, mock_encoder):
        scores, best = attribute_verify(
            unit([1.0, 0.0]), {"a": (), "b": (), "c": ()}, mock_encoder(dim=2)
        )
        assert best is None
        assert all(v == -math.inf for v in scores.values())

    def test_argmax_stable_under_uniform_shift(self, mock_encoder):
        # two fixtures whose candidate means differ by a constant 0.2
        query = unit([1.0, 0.0])
        low = mock_encoder(dim=2, fixture={
            "p": [0.5, math.sqrt(0.75)], "q": [0.3, math.sqrt(0.91)],
        })
        high = mock_encoder(dim=2, fixture={
            "p": [0.7, math.sqrt(0.51)], "q": [0.5, math.sqrt(0.75)],
        })
        _, best_low = attribute_verify(query, {"x": ("p",), "y": ("q",)}, low)
        _, best_high = attribute_verify(query, {"x": ("p",), "y": ("q",)}, high)
        assert best_low == best_high == "x"

    def test_text_template_applied(self, mock_encoder):
        encoder = mock_encoder(dim=2, fixture={
            "a photo of dent": [1.0, 0.0],
        })
        scores, _ = attribute_verify(
            unit([1.0, 0.0]), {"c": ("dent",)}, encoder,
            text_template="a photo of {}",
        )
        assert scores["c"] == pytest.approx(1.0)


class TestCotSelect:
    def _candidates(self, db, gateways, label="q-alpha"):
        query = gateways.encoder.encode_image(query_image(label))
        return retrieve(query, db.snapshot(), 3)

    def test_letter_map_composition(self):
        db, gateways = build_scenario([
            cot_turn("q-alpha", cot_reply("B", B="blue glaze")),
        ])
        candidates = self._candidates(db, gateways)
        records = {r.concept_id: r for r in db.snapshot()}
        selection = cot_select(
            query_image("q-alpha"), candidates, records, gateways.vlm
        )
        # rank order: alpha (A), beta (B), gamma (C)
        assert selection.chosen == "c-beta"
        assert selection.vlm_calls == 1
        assert not selection.fell_back

    def test_none_yields_empty_attribute_list(self):
        db, gateways = build_scenario([
            cot_turn("q-alpha", cot_reply("A", A="red glaze", B="None")),
        ])
        candidates = self._candidates(db, gateways)
        records = {r.concept_id: r for r in db.snapshot()}
        selection = cot_select(
            query_image("q-alpha"), candidates, records, gateways.vlm
        )
        assert selection.verdict.matched_attributes["B"] == ()
        assert selection.verdict.matched_attributes["A"] == ("red glaze",)

    def test_unparseable_twice_falls_back_to_rank1(self):
        db, gateways = build_scenario([
            cot_turn("q-alpha", "I cannot answer in JSON, sorry."),
        ])
        candidates = self._candidates(db, gateways)
        records = {r.concept_id: r for r in db.snapshot()}
        selection = cot_select(
            query_image("q-alpha"), candidates, records, gateways.vlm
        )
        assert selection.fell_back
        assert selection.chosen == "c-alpha"  # retrieval rank-1
        assert selection.vlm_calls == 2


class TestPairwiseRefine:
    def test_argmax_wins(self):
        db, gateways = build_scenario([
            pairwise_turn("q-alpha", "ref-alpha", False),
            pairwise_turn("q-alpha", "ref-beta", True),
            pairwise_turn("q-alpha", "ref-gamma", False),
        ])
        query = gateways.encoder.encode_image(query_image("q-alpha"))
        candidates = retrieve(query, db.snapshot(), 3)
        records = {r.concept_id: r for r in db.snapshot()}
        probs, chosen, flags = pairwise_refine(
            query_image("q-alpha"), candidates, records, gateways
        )
        assert chosen == "c-beta"
        assert probs["c-beta"] > 0.9
        assert len(gateways.vlm.calls) == 3
        assert flags == ()

    def test_all_no_falls_back_to_rank1_with_flag(self):
        turns = [
            pairwise_turn("q-alpha", ref, False)
            for ref in ("ref-alpha", "ref-beta", "ref-gamma")
        ]
        db, gateways = build_scenario(turns)
        query = gateways.encoder.encode_image(query_image("q-alpha"))
        candidates = retrieve(query, db.snapshot(), 3)
        records = {r.concept_id: r for r in db.snapshot()}
        probs, chosen, flags = pairwise_refine(
            query_image("q-alpha"), candidates, records, gateways
        )
        assert chosen == "c-alpha"  # equal low probs: first in rank order
        assert "pairwise_all_no" in flags

    def test_unparseable_candidate_scores_zero(self):
        turns = [
            ScriptedTurn(
                image_labels=("q-alpha", "ref-alpha"),
                prompt_contains="Can you see",
                response_text="total gibberish",
            ),
            pairwise_turn("q-alpha", "ref-beta", True),
            pairwise_turn("q-alpha", "ref-gamma", False),
        ]
        db, gateways = build_scenario(turns)
        query = gateways.encoder.encode_image(query_image("q-alpha"))
        candidates = retrieve(query, db.snapshot(), 3)
        records = {r.concept_id: r for r in db.snapshot()}
        probs, chosen, flags = pairwise_refine(
            query_image("q-alpha"), candidates, records, gateways
        )
        assert probs["c-alpha"] == 0.0
        assert chosen == "c-beta"
        assert "pairwise_unparseable:c-alpha" in flags

    def test_two_images_sent_query_first(self):
        db, gateways = build_scenario([
            pairwise_turn("q-alpha", "ref-alpha", True),
            pairwise_turn("q-alpha", "ref-beta", False),
            pairwise_turn("q-alpha", "ref-gamma", False),
        ])
        query = gateways.encoder.encode_image(query_image("q-alpha"))
        candidates = retrieve(query, db.snapshot(), 3)
        records = {r.concept_id: r for r in db.snapshot()}
        pairwise_refine(query_image("q-alpha"), candidates, records, gateways)
        for request in gateways.vlm.calls:
            assert len(request.images) == 2
            # scripted matcher already proves ordering: (query, reference)


class TestInferConcept:
    def test_verification_pass_skips_pairwise(self):
        db, gateways = build_scenario([
            cot_turn("q-alpha", cot_reply("A", A="red glaze, round body")),
        ])
        trace = infer_concept(query_image("q-alpha"), db, gateways)
        assert trace.c_tilde == "c-alpha"
        assert trace.c_tilde_a == "c-alpha"
        assert trace.verification_passed is True
        assert trace.pairwise_probs is None
        assert trace.final == "c-alpha"
        assert trace.vlm_calls == 1

    def test_verification_fail_triggers_pairwise(self):
        # the hallucination-correction scenario: selection names alpha on a
        # fabricated attribute, the attribute check prefers gamma, and the
        # pairwise pass recovers gamma
        db, gateways = build_scenario([
            cot_turn("q-gamma", cot_reply("B", A="green glaze", B="red glaze")),
            pairwise_turn("q-gamma", "ref-alpha", False),
            pairwise_turn("q-gamma", "ref-beta", False),
            pairwise_turn("q-gamma", "ref-gamma", True),
        ])
        trace = infer_concept(query_image("q-gamma"), db, gateways)
        # rank order for q-gamma: gamma (A), alpha (B), beta (C)
        assert trace.candidate_set.ids() == ("c-gamma", "c-alpha", "c-beta")
        assert trace.c_tilde == "c-alpha"
        assert trace.c_tilde_a == "c-gamma"
        assert trace.verification_passed is False
        assert trace.final == "c-gamma"
        assert trace.vlm_calls == 1 + 3

    def test_all_empty_attributes_fail_verification(self):
        db, gateways = build_scenario([
            cot_turn("q-alpha", cot_reply("A")),  # every option "None"
            pairwise_turn("q-alpha", "ref-alpha", True),
            pairwise_turn("q-alpha", "ref-beta", False),
            pairwise_turn("q-alpha", "ref-gamma", False),
        ])
        trace = infer_concept(query_image("q-alpha"), db, gateways)
        assert trace.c_tilde_a is None
        assert trace.verification_passed is False
        assert trace.final == "c-alpha"
        assert trace.vlm_calls == 4

    def test_cot_fallback_routes_to_pairwise(self):
        db, gateways = build_scenario([
            cot_turn("q-alpha", "nope, not json"),
            pairwise_turn("q-alpha", "ref-alpha", False),
            pairwise_turn("q-alpha", "ref-beta", True),
            pairwise_turn("q-alpha", "ref-gamma", False),
        ])
        trace = infer_concept(query_image("q-alpha"), db, gateways)
        assert "cot_fallback" in trace.flags
        assert trace.verification_passed is False
        assert trace.final == "c-beta"
        assert trace.vlm_calls == 2 + 3  # re-ask counted too

    def test_final_always_in_candidate_set(self):
        db, gateways = build_scenario([
            cot_turn("q-alpha", cot_reply("A", A="red glaze")),
        ])
        trace = infer_concept(query_image("q-alpha"), db, gateways)
        assert trace.final in trace.candidate_set.ids()

    def test_determinism(self):
        turns = [cot_turn("q-alpha", cot_reply("A", A="red glaze"))]
        db, gateways = build_scenario(turns)
        first = infer_concept(query_image("q-alpha"), db, gateways)
        second = infer_concept(query_image("q-alpha"), db, gateways)
        assert first.to_json_dict() == second.to_json_dict()

    def test_empty_database(self):
        _, gateways = build_scenario([])
        with pytest.raises(EmptyDatabase):
            infer_concept(query_image("q-alpha"), ConceptDatabase(), gateways)

    def test_k_clamps_to_db_size(self):
        db, gateways = build_scenario([
            cot_turn("q-alpha", cot_reply("A", A="red glaze")),
        ])
        config = PipelineConfig(k=10)
        trace = infer_concept(query_image("q-alpha"), db, gateways, config)
        assert len(trace.candidate_set.entries) == 3


class TestVerificationStrategies:
    def test_abstention_confident_accepts(self):
        db, gateways = build_scenario([
            cot_turn("q-alpha", cot_reply("A", A="red glaze")),
        ])
        config = PipelineConfig(verification="abstention")
        trace = infer_concept(query_image("q-alpha"), db, gateways, config)
        assert trace.verification_passed is True
        assert trace.final == "c-alpha"
        assert trace.vlm_calls == 1

    def test_abstention_unsure_triggers_pairwise(self):
        db, gateways = build_scenario([
            cot_turn("q-alpha", cot_reply("D")),  # D = "I am not sure"
            pairwise_turn("q-alpha", "ref-alpha", False),
            pairwise_turn("q-alpha", "ref-beta", False),
            pairwise_turn("q-alpha", "ref-gamma", True),
        ])
        config = PipelineConfig(verification="abstention")
        trace = infer_concept(query_image("q-alpha"), db, gateways, config)
        assert "cot_abstained" in trace.flags
        assert trace.verification_passed is False
        assert trace.final == "c-gamma"
        assert trace.vlm_calls == 4

    def _logits_turn(self, answer_logit, idk_logit):
        return ScriptedTurn(
            image_labels=("q-alpha",),
            prompt_contains="Which description matches",
            response_text=cot_reply("A", A="red glaze"),
        )

    def test_logits_based_idk_wins_triggers_pairwise(self):
        # craft a scripted response carrying answer-token logits via a
        # subclassed mock: letter A vs the IDK letter D
        class LogitVlm(ScriptedVlm):
            def _chat(self, request):
                response = super()._chat(request)
                if "Which description matches" in request.prompt_text:
                    from percept.vlm import ChatResponse

                    return ChatResponse(
                        text=response.text,
                        first_token_logits={"A": -1.2, "D": -0.3},
                    )
                return response

        turns = [
            cot_turn("q-alpha", cot_reply("A", A="red glaze")),
            pairwise_turn("q-alpha", "ref-alpha", True),
            pairwise_turn("q-alpha", "ref-beta", False),
            pairwise_turn("q-alpha", "ref-gamma", False),
        ]
        db, gateways = build_scenario(turns)
        gateways.vlm = LogitVlm(turns)
        config = PipelineConfig(verification="logits_based")
        trace = infer_concept(query_image("q-alpha"), db, gateways, config)
        assert trace.verification_passed is False
        assert trace.vlm_calls == 4

    def test_logits_based_answer_wins_accepts(self):
        class LogitVlm(ScriptedVlm):
            def _chat(self, request):
                response = super()._chat(request)
                if "Which description matches" in request.prompt_text:
                    from percept.vlm import ChatResponse

                    return ChatResponse(
                        text=response.text,
                        first_token_logits={"A": -0.1, "D": -3.0},
                    )
                return response

        turns = [cot_turn("q-alpha", cot_reply("A", A="red glaze"))]
        db, gateways = build_scenario(turns)
        gateways.vlm = LogitVlm(turns)
        config = PipelineConfig(verification="logits_based")
        trace = infer_concept(query_image("q-alpha"), db, gateways, config)
        assert trace.verification_passed is True
        assert trace.vlm_calls == 1

    def test_pairwise_always_skips_verification(self):
        db, gateways = build_scenario([
            cot_turn("q-alpha", cot_reply("B", B="blue glaze")),
            pairwise_turn("q-alpha", "ref-alpha", True),
            pairwise_turn("q-alpha", "ref-beta", False),
            pairwise_turn("q-alpha", "ref-gamma", False),
        ])
        config = PipelineConfig(verification="pairwise_always")
        trace = infer_concept(query_image("q-alpha"), db, gateways, config)
        assert trace.verification_passed is None
        assert trace.attribute_scores is None
        assert trace.pairwise_probs is not None
        assert trace.final == "c-alpha"
        assert trace.vlm_calls == 4

    def test_none_accepts_selection(self):
        db, gateways = build_scenario([
            cot_turn("q-alpha", cot_reply("C", C="green glaze")),
        ])
        config = PipelineConfig(verification="none")
        trace = infer_concept(query_image("q-alpha"), db, gateways, config)
        assert trace.verification_passed is None
        assert trace.final == "c-gamma"
        assert trace.vlm_calls == 1


class TestComponentToggles:
    def test_retrieval_only(self):
        db, gateways = build_scenario([])
        config = PipelineConfig(
            enable_cot=False, enable_fingerprints=False, enable_pairwise=False,
            verification="none",
        )
        trace = infer_concept(query_image("q-alpha"), db, gateways, config)
        assert trace.cot_verdict is None
        assert trace.attribute_scores is None
        assert trace.pairwise_probs is None
        assert trace.final == "c-alpha"  # rank-1
        assert trace.vlm_calls == 0

    def test_cot_only(self):
        db, gateways = build_scenario([
            cot_turn("q-alpha", cot_reply("B", B="blue glaze")),
        ])
        config = PipelineConfig(enable_pairwise=False, verification="none")
        trace = infer_concept(query_image("q-alpha"), db, gateways, config)
        assert trace.cot_verdict is not None
        assert trace.pairwise_probs is None
        assert trace.final == "c-beta"
        assert trace.vlm_calls == 1

    def test_cot_without_fingerprints_prompts_without_attributes(self):
        db, gateways = build_scenario([
            cot_turn("q-alpha", cot_reply("A")),
        ])
        config = PipelineConfig(
            enable_fingerprints=False, enable_pairwise=False, verification="none",
        )
        trace = infer_concept(query_image("q-alpha"), db, gateways, config)
        prompt = gateways.vlm.calls[0].prompt_text
        assert "distinct features" not in prompt.split("Your Task")[0]
        assert trace.final == "c-alpha"

    def test_pairwise_only(self):
        db, gateways = build_scenario([
            pairwise_turn("q-alpha", "ref-alpha", False),
            pairwise_turn("q-alpha", "ref-beta", False),
            pairwise_turn("q-alpha", "ref-gamma", True),
        ])
        config = PipelineConfig(
            enable_cot=False, enable_fingerprints=False,
            verification="pairwise_always",
        )
        trace = infer_concept(query_image("q-alpha"), db, gateways, config)
        assert trace.cot_verdict is None
        assert trace.final == "c-gamma"
        assert trace.vlm_calls == 3

    def test_full_pipeline_distinct_from_toggled(self):
        db, gateways = build_scenario([
            cot_turn("q-alpha", cot_reply("A", A="red glaze")),
        ])
        trace = infer_concept(query_image("q-alpha"), db, gateways)
        assert trace.cot_verdict is not None
        assert trace.attribute_scores is not None
        assert trace.verification_passed is True

    def test_verification_fail_with_pairwise_disabled_keeps_selection(self):
        db, gateways = build_scenario([
            cot_turn("q-gamma", cot_reply("B", A="green glaze", B="red glaze")),
        ])
        config = PipelineConfig(enable_pairwise=False)
        trace = infer_concept(query_image("q-gamma"), db, gateways, config)
        assert trace.verification_passed is False
        assert trace.pairwise_probs is None
        assert trace.final == "c-alpha"  # the (wrong) selection stands
        assert trace.vlm_calls == 1


class TestConfigValidation:
    def test_pairwise_always_requires_pairwise(self):
        with pytest.raises(ValueError):
            PipelineConfig(
                verification="pairwise_always", enable_pairwise=False
            ).validate()

    def test_no_fingerprints_restricts_verification(self):
        with pytest.raises(ValueError):
            PipelineConfig(
                enable_fingerprints=False, verification="attribute"
            ).validate()

    def test_no_cot_restricts_verification(self):
        with pytest.raises(ValueError):
            PipelineConfig(enable_cot=False, verification="abstention").validate()

    def test_round_trip_dict(self):
        config = PipelineConfig(k=5, verification="abstention")
        assert PipelineConfig.from_dict(config.to_dict()) == config


class TestAnswerQuery:
    def _scenario_resolving_alpha(self, extra_turns=()):
        return build_scenario([
            cot_turn("q-alpha", cot_reply("A", A="red glaze, round body")),
            *extra_turns,
        ])

    def test_recognition_yes(self):
        db, gateways = self._scenario_resolving_alpha()
        answer = answer_query(
            query_image("q-alpha"), QueryTask.recognition("alpha-mug"),
            db, gateways,
        )
        assert answer.text == "yes"
        assert answer.concept_name == "alpha-mug"

    def test_recognition_no_for_other_target(self):
        db, gateways = self._scenario_resolving_alpha()
        answer = answer_query(
            query_image("q-alpha"), QueryTask.recognition("beta-mug"),
            db, gateways,
        )
        assert answer.text == "no"
        assert answer.concept_name == "alpha-mug"  # what the image resolved to

    def test_recognition_unknown_target(self):
        db, gateways = self._scenario_resolving_alpha()
        with pytest.raises(UnknownTargetConcept):
            answer_query(
                query_image("q-alpha"), QueryTask.recognition("nonexistent"),
                db, gateways,
            )

    def test_direct_pairwise_recognition(self):
        db, gateways = build_scenario([
            pairwise_turn("q-alpha", "ref-alpha", True),
        ])
        config = PipelineConfig(recognition_mode="direct_pairwise")
        answer = answer_query(
            query_image("q-alpha"), QueryTask.recognition("alpha-mug"),
            db, gateways, config,
        )
        assert answer.text == "yes"
        assert answer.trace.vlm_calls == 1
        assert "direct_pairwise" in answer.trace.flags
        assert len(gateways.vlm.calls) == 1  # retrieval and selection skipped

    def test_direct_pairwise_below_threshold_is_no(self):
        db, gateways = build_scenario([
            pairwise_turn("q-alpha", "ref-beta", False),
        ])
        config = PipelineConfig(recognition_mode="direct_pairwise")
        answer = answer_query(
            query_image("q-alpha"), QueryTask.recognition("beta-mug"),
            db, gateways, config,
        )
        assert answer.text == "no"

    def test_caption_injects_resolved_name(self):
        caption_turn = ScriptedTurn(
            image_labels=("q-alpha",),
            prompt_contains="The main subject is alpha-mug",
            response_text="A photo of alpha-mug on a desk.",
        )
        db, gateways = self._scenario_resolving_alpha([caption_turn])
        answer = answer_query(
            query_image("q-alpha"), QueryTask.caption(), db, gateways,
        )
        assert answer.text == "A photo of alpha-mug on a desk."
        assert answer.concept_name == "alpha-mug"

    def test_vqa_uses_question_and_choices(self):
        vqa_turn = ScriptedTurn(
            image_labels=("q-alpha",),
            prompt_contains="Question: What color is this mug?",
            response_text="red",
        )
        db, gateways = self._scenario_resolving_alpha([vqa_turn])
        answer = answer_query(
            query_image("q-alpha"),
            QueryTask.vqa("What color is this mug?", ["red", "blue", "green"]),
            db, gateways,
        )
        assert answer.text == "red"
        prompt = gateways.vlm.calls[-1].prompt_text
        assert "Choices: red, blue, green" in prompt

    def test_trace_serialization_round_trip(self):
        db, gateways = self._scenario_resolving_alpha()
        answer = answer_query(
            query_image("q-alpha"), QueryTask.recognition("alpha-mug"),
            db, gateways,
        )
        payload = answer.trace.to_json_dict()
        as_json = json.dumps(payload, sort_keys=True)
        assert json.loads(as_json) == payload
        assert payload["final"] == "c-alpha"
        assert payload["vlm_calls"] == 1
