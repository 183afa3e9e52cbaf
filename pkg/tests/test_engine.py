import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from amelo.cases import CaseRecord, Gender
from amelo.engine import (
    CASE_TEMPLATE,
    EmptyQuery,
    EmptyRepository,
    EngineConfig,
    OutOfRangeDistance,
    Query,
    QueryMode,
    RouteMethod,
    build_case_text,
    cascade_route,
    distance_to_similarity,
    index_repository,
    keyword_search,
    prepare_query,
    query,
)
from amelo.vectorize import DenseStore

SCENARIO = (
    "Painless swelling in right mandible, gradually enlarging over 8 months. "
    "Firm, non-tender with intact mucosa. "
    "Radiograph shows multilocular radiolucent lesion from first molar to ramus."
)


def repository():
    return [
        CaseRecord(
            pmcid="PMC7234567", patient_age=47, patient_gender=Gender.male,
            presenting_complaint="painless swelling of the right mandible",
            clinical_features="firm non-tender swelling with intact mucosa",
            radiological_features="multilocular radiolucent lesion from first molar to ramus",
            histopathological_features="follicular islands with stellate reticulum",
            tumor_location="right mandible",
            diagnosis_raw="Follicular ameloblastoma",
            treatment="segmental mandibulectomy with fibular free flap reconstruction",
            tumor_size_mm=(45.0, 32.0),
        ),
        CaseRecord(
            pmcid="PMC8456123", patient_age=39, patient_gender=Gender.female,
            presenting_complaint="slow growing painless maxillary swelling",
            radiological_features="unilocular radiolucency of the maxilla",
            tumor_location="left maxilla",
            diagnosis_raw="Plexiform ameloblastoma",
            treatment="partial maxillectomy with reconstruction plate",
            tumor_size_mm=(38.0, 25.0),
        ),
        CaseRecord(
            pmcid="PMC6543210", patient_age=52, patient_gender=Gender.female,
            presenting_complaint="recurrent swelling of the jaw",
            radiological_features="multilocular soap bubble appearance",
            tumor_location="mandibular angle",
            diagnosis_raw="Follicular ameloblastoma",
            treatment="marginal mandibulectomy with iliac crest bone graft",
            tumor_size_mm=(32.0, 28.0),
        ),
    ]


def dense_fixture(cases):
    store = DenseStore()
    eye = np.eye(8, dtype=np.float32)
    for i, record in enumerate(cases):
        store.ingest(record.pmcid, eye[i])
    return store


class TestBuildCaseText:
    def test_template_prefix_and_order(self):
        ct = build_case_text(repository()[0])
        assert ct.text.startswith("Presenting complaint: painless swelling of the right mandible.")
        labels = [label for label, _ in CASE_TEMPLATE]
        positions = [ct.text.find(f"{label}:") for label in labels]
        assert positions == sorted(positions)
        assert -1 not in positions

    def test_all_empty_record_renders_unknown_in_every_slot(self):
        ct = build_case_text(CaseRecord(pmcid="PMC1"))
        assert ct.text.count("unknown") == len(CASE_TEMPLATE)
        assert ct.text.endswith("Patient gender: unknown.")

    def test_tumor_size_rendering(self):
        ct = build_case_text(CaseRecord(pmcid="PMC1", tumor_size_mm=(45.0, 32.0)))
        assert "Tumor size: 45 mm x 32 mm." in ct.text

    def test_spans_reconstruct_text(self):
        ct = build_case_text(repository()[0])
        raw = ct.text.encode("utf-8")
        rebuilt = b"".join(raw[s:e] for _, key in CASE_TEMPLATE for s, e in [ct.spans[key]])
        assert rebuilt == raw


class TestDistanceToSimilarity:
    def test_anchors(self):
        assert distance_to_similarity(0.0) == pytest.approx(1.0)
        assert distance_to_similarity(np.sqrt(2.0)) == pytest.approx(0.0, abs=1e-12)
        assert distance_to_similarity(2.0) == pytest.approx(0.0)

    def test_out_of_range(self):
        with pytest.raises(OutOfRangeDistance):
            distance_to_similarity(2.5)
        with pytest.raises(OutOfRangeDistance):
            distance_to_similarity(-0.5)

    @given(st.floats(min_value=0.0, max_value=2.0), st.floats(min_value=0.0, max_value=2.0))
    def test_monotone_decreasing(self, d1, d2):
        lo, hi = sorted((d1, d2))
        assert distance_to_similarity(lo) >= distance_to_similarity(hi)

    @given(st.floats(min_value=0.0, max_value=2.0))
    def test_range(self, d):
        assert 0.0 <= distance_to_similarity(d) <= 1.0


class TestIndexRepository:
    def test_counts_with_full_dense_coverage(self):
        cases = repository()
        state = index_repository(cases, dense_fixture(cases))
        assert state.count == 3
        assert state.flat is not None and state.flat.count == 3

    def test_degraded_mode_without_dense(self):
        state = index_repository(repository(), None)
        assert state.flat is None
        results = query(state, Query(mode=QueryMode.free_text, text=SCENARIO))
        assert results  # sparse path still serves

    def test_reindex_after_adding_case(self):
        cases = repository()
        state1 = index_repository(cases, None)
        extra = CaseRecord(pmcid="PMC9999999", presenting_complaint="swelling")
        state2 = index_repository(cases + [extra], None)
        assert state2.count == state1.count + 1


class TestQuery:
    def test_scenario_ranks_matching_case_first(self):
        state = index_repository(repository(), None)
        results = query(state, Query(mode=QueryMode.free_text, text=SCENARIO, k=5))
        assert results[0].pmcid == "PMC7234567"
        top = results[0]
        assert 0.0 <= top.similarity <= 1.0
        assert top.summary.diagnosis == "Follicular ameloblastoma"
        assert top.summary.treatment.startswith("segmental mandibulectomy")
        assert top.summary.tumor_size_mm == (45.0, 32.0)
        assert top.summary.patient_age == 47
        assert top.summary.patient_gender == "male"
        assert top.summary.reference_id == "PMC7234567"

    def test_self_retrieval_with_own_vector(self):
        cases = repository()
        store = dense_fixture(cases)
        state = index_repository(cases, store)
        own_text = state.case_texts["PMC7234567"].text
        q = Query(
            mode=QueryMode.free_text,
            text=own_text,
            k=3,
            vector=tuple(store.get("PMC7234567").tolist()),
        )
        results = query(state, q)
        assert results[0].pmcid == "PMC7234567"
        assert results[0].similarity == pytest.approx(1.0)
        assert results[0].rank == 1
        assert results[0].method is RouteMethod.dense

    def test_k_exceeding_repository(self):
        state = index_repository(repository(), None)
        results = query(state, Query(mode=QueryMode.free_text, text=SCENARIO, k=5))
        assert len(results) == 3

    def test_structured_form_query(self):
        state = index_repository(repository(), None)
        form = CaseRecord(pmcid="PMC0", diagnosis_raw="plexiform ameloblastoma",
                          tumor_location="maxilla")
        results = query(state, Query(mode=QueryMode.structured_form, form=form, k=2))
        assert results[0].pmcid == "PMC8456123"

    def test_empty_query_raises(self):
        state = index_repository(repository(), None)
        with pytest.raises(EmptyQuery):
            query(state, Query(mode=QueryMode.free_text, text="   "))

    def test_empty_repository_raises(self):
        state = index_repository(repository(), None)
        empty = state.__class__(
            cases={}, case_texts={}, tfidf=state.tfidf, sparse={}, tokens={},
            flat=None, clustered=None, config=state.config,
        )
        with pytest.raises(EmptyRepository):
            query(empty, Query(mode=QueryMode.free_text, text="swelling"))

    def test_results_sorted_with_contiguous_ranks(self):
        state = index_repository(repository(), None)
        results = query(state, Query(mode=QueryMode.free_text, text=SCENARIO, k=5))
        sims = [r.similarity for r in results]
        assert sims == sorted(sims, reverse=True)
        assert [r.rank for r in results] == list(range(1, len(results) + 1))
        assert all(0.0 <= s <= 1.0 for s in sims)

    def test_determinism_byte_for_byte(self):
        state = index_repository(repository(), None)
        q = Query(mode=QueryMode.free_text, text=SCENARIO, k=5)
        a = json.dumps([r.to_dict() for r in query(state, q)], sort_keys=True)
        b = json.dumps([r.to_dict() for r in query(state, q)], sort_keys=True)
        assert a == b


class TestCascadeRoute:
    def test_short_query_routes_sparse(self):
        cases = repository()
        state = index_repository(cases, dense_fixture(cases))
        prepared = prepare_query(state, Query(mode=QueryMode.free_text, text="painless swelling"))
        assert cascade_route(state, prepared) is RouteMethod.sparse

    def test_all_oov_routes_keyword(self):
        cases = repository()
        state = index_repository(cases, dense_fixture(cases))
        prepared = prepare_query(
            state, Query(mode=QueryMode.free_text, text="zz qq xx yy ww vv")
        )
        assert prepared.sparse_vec.is_zero()
        assert cascade_route(state, prepared) is RouteMethod.keyword

    def test_long_query_with_planted_vector_routes_dense(self):
        cases = repository()
        store = dense_fixture(cases)
        state = index_repository(cases, store)
        q = Query(
            mode=QueryMode.free_text, text=SCENARIO, k=3,
            vector=tuple(store.get("PMC7234567").tolist()),
        )
        prepared = prepare_query(state, q)
        assert cascade_route(state, prepared) is RouteMethod.dense

    def test_dense_underperformance_reroutes_to_sparse(self):
        cases = repository()
        store = dense_fixture(cases)  # stored vectors live on axes 0..2
        state = index_repository(cases, store)
        away = np.zeros(8, dtype=np.float32)
        away[7] = 1.0  # orthogonal to every stored vector: top-1 similarity 0
        q = Query(mode=QueryMode.free_text, text=SCENARIO, k=3, vector=tuple(away.tolist()))
        prepared = prepare_query(state, q)
        assert cascade_route(state, prepared) is RouteMethod.sparse

    def test_totality_no_routing_errors(self):
        cases = repository()
        state = index_repository(cases, dense_fixture(cases))
        for text in ("swelling", "zz qq", SCENARIO, "mandible", "a b c d e f g"):
            prepared = prepare_query(state, Query(mode=QueryMode.free_text, text=text))
            assert cascade_route(state, prepared) in RouteMethod


class TestKeywordSearch:
    def test_full_overlap_scores_one(self):
        state = index_repository(repository(), None)
        tokens = sorted(state.tokens["PMC7234567"])
        results = keyword_search(state, tokens, k=1)
        assert results[0].pmcid == "PMC7234567"
        assert results[0].similarity == pytest.approx(1.0)

    def test_zero_overlap_empty(self):
        state = index_repository(repository(), None)
        assert keyword_search(state, ["zzzz", "qqqq"], k=5) == []

    def test_hand_scores_order(self):
        cases = [
            CaseRecord(pmcid="PMC1", presenting_complaint="alpha beta gamma"),
            CaseRecord(pmcid="PMC2", presenting_complaint="alpha delta epsilon"),
            CaseRecord(pmcid="PMC3", presenting_complaint="zeta eta theta"),
        ]
        state = index_repository(cases, None)
        results = keyword_search(state, ["alpha", "beta", "gamma"], k=5)
        # overlaps 3/3, 1/3, 0
        assert [r.pmcid for r in results] == ["PMC1", "PMC2"]
        assert results[0].similarity == pytest.approx(1.0)
        assert results[1].similarity == pytest.approx(1 / 3)

    def test_empty_query_tokens(self):
        state = index_repository(repository(), None)
        with pytest.raises(EmptyQuery):
            keyword_search(state, [], k=5)
