import base64
import json

import pytest
from fastapi.testclient import TestClient

from amelo.cases import CaseRecord, Gender, ImageRecord, Modality
from amelo.service import ServiceConfig, create_app
from amelo.store import CaseStore, CorruptLog, DuplicateCase, UnknownPmcid

SCENARIO = (
    "Painless swelling in right mandible, gradually enlarging over 8 months. "
    "Firm, non-tender with intact mucosa. "
    "Radiograph shows multilocular radiolucent lesion from first molar to ramus."
)


def record(pmcid="PMC7234567", **overrides):
    base = dict(
        pmcid=pmcid,
        patient_age=47,
        patient_gender=Gender.male,
        presenting_complaint="painless swelling of the right mandible",
        radiological_features="multilocular radiolucent lesion from first molar to ramus",
        diagnosis_raw="Follicular ameloblastoma",
        treatment="segmental mandibulectomy",
        tumor_size_mm=(45.0, 32.0),
    )
    base.update(overrides)
    return CaseRecord(**base)


class TestCaseStore:
    def test_put_then_replay_reproduces_state(self, tmp_path):
        store = CaseStore(tmp_path)
        store.put_case(record("PMC1"))
        store.put_case(record("PMC2"))
        store.delete_case("PMC1")
        store.close()

        again = CaseStore(tmp_path)
        assert set(again.cases) == {"PMC2"}
        assert again.cases["PMC2"] == record("PMC2")

    def test_duplicate_create_rejected(self, tmp_path):
        store = CaseStore(tmp_path)
        store.put_case(record("PMC1"), create_only=True)
        with pytest.raises(DuplicateCase):
            store.put_case(record("PMC1"), create_only=True)

    def test_delete_unknown(self, tmp_path):
        with pytest.raises(UnknownPmcid):
            CaseStore(tmp_path).delete_case("PMC404")

    def test_delete_case_tombstones_images(self, tmp_path):
        store = CaseStore(tmp_path)
        store.put_case(record("PMC1"))
        store.put_image(ImageRecord(image_id="i1", pmcid="PMC1", modality=Modality.radiology))
        store.delete_case("PMC1")
        store.close()
        again = CaseStore(tmp_path)
        assert again.images == {}
        # tombstones never truncate: the log keeps every mutation
        lines = (tmp_path / "cases.log").read_text().strip().splitlines()
        assert len(lines) == 3

    def test_corrupt_interior_line_named(self, tmp_path):
        store = CaseStore(tmp_path)
        for i in range(1, 10):
            store.put_case(record(f"PMC{i}"))
        store.close()
        lines = (tmp_path / "cases.log").read_text().splitlines()
        lines[6] = '{"op": "put_case", "data": BROKEN'
        (tmp_path / "cases.log").write_text("\n".join(lines) + "\n")
        with pytest.raises(CorruptLog) as err:
            CaseStore(tmp_path)
        assert err.value.line == 7

    def test_torn_final_line_ignored(self, tmp_path):
        store = CaseStore(tmp_path)
        store.put_case(record("PMC1"))
        store.put_case(record("PMC2"))
        store.close()
        with open(tmp_path / "cases.log", "ab") as fh:
            fh.write(b'{"seq": 3, "op": "put_case", "dat')  # no newline: torn write
        again = CaseStore(tmp_path)
        assert set(again.cases) == {"PMC1", "PMC2"}
        # and the store keeps accepting appends afterwards
        again.put_case(record("PMC3"))
        again.close()
        final = CaseStore(tmp_path)
        assert set(final.cases) == {"PMC1", "PMC2", "PMC3"}

    def test_blob_store_content_addressed(self, tmp_path):
        store = CaseStore(tmp_path)
        p1 = store.store_blob(b"same bytes")
        p2 = store.store_blob(b"same bytes")
        assert p1 == p2
        assert (tmp_path / p1).read_bytes() == b"same bytes"


@pytest.fixture()
def client(tmp_path):
    config = ServiceConfig(store_dir=tmp_path / "store")
    app = create_app(config)
    with TestClient(app) as c:
        yield c


class TestServiceCases:
    def test_health_on_empty_store(self, client):
        body = client.get("/health").json()
        assert body == {"status": "ok", "cases": 0}

    def test_create_read_round_trip(self, client):
        payload = record().to_dict()
        assert client.post("/cases", json=payload).status_code == 201
        got = client.get("/cases/PMC7234567")
        assert got.status_code == 200
        assert got.json() == payload

    def test_duplicate_create_409(self, client):
        payload = record().to_dict()
        client.post("/cases", json=payload)
        response = client.post("/cases", json=payload)
        assert response.status_code == 409
        body = response.json()
        assert body["code"] == "duplicate_case"
        assert set(body) == {"code", "message", "path"}

    def test_schema_violation_400_with_field_path(self, client):
        payload = record().to_dict()
        payload["tumor_size_mm"] = [-3.0]
        response = client.post("/cases", json=payload)
        assert response.status_code == 400
        body = response.json()
        assert body["code"] == "schema_violation"
        assert body["path"].startswith("tumor_size_mm")

    def test_unknown_pmcid_404(self, client):
        response = client.get("/cases/PMC000")
        assert response.status_code == 404
        assert response.json()["code"] == "unknown_pmcid"

    def test_update_visible_to_immediate_read(self, client):
        client.post("/cases", json=record().to_dict())
        updated = record(treatment="enucleation only").to_dict()
        assert client.put("/cases/PMC7234567", json=updated).status_code == 200
        assert client.get("/cases/PMC7234567").json()["treatment"] == "enucleation only"

    def test_delete_invalid_entries_decrements_list(self, client):
        for i in range(1, 12):
            client.post("/cases", json=record(f"PMC{i:07d}").to_dict())
        assert client.get("/cases").json()["total"] == 11
        for i in range(1, 10):  # remove nine invalid entries
            assert client.delete(f"/cases/PMC{i:07d}").status_code == 200
        assert client.get("/cases").json()["total"] == 2

    def test_list_pagination(self, client):
        for i in range(1, 6):
            client.post("/cases", json=record(f"PMC{i}").to_dict())
        page = client.get("/cases", params={"offset": 1, "limit": 2}).json()
        assert [c["pmcid"] for c in page["cases"]] == ["PMC2", "PMC3"]
        assert page["total"] == 5


class TestServiceImages:
    def test_image_crud_and_case_tombstone(self, client):
        client.post("/cases", json=record("PMC1").to_dict())
        image = {
            "image_id": "img-1", "pmcid": "PMC1", "modality": "radiology",
            "sub_labels": ["CT", "axial"], "caption": "axial CT",
            "blob_base64": base64.b64encode(b"fakebytes").decode(),
        }
        created = client.post("/images", json=image)
        assert created.status_code == 201
        assert created.json()["file_path"].startswith("blobs/")

        listing = client.get("/cases/PMC1/images").json()["images"]
        assert len(listing) == 1

        updated = dict(created.json())
        updated["caption"] = "axial CT of the mandible"
        assert client.put("/images/img-1", json=updated).status_code == 200

        client.delete("/cases/PMC1")
        assert client.get("/cases/PMC1/images").status_code == 404

    def test_image_for_unknown_case_404(self, client):
        response = client.post("/images", json={
            "image_id": "img-9", "pmcid": "PMC999", "modality": "pathology",
        })
        assert response.status_code == 404

    def test_delete_unknown_image_404(self, client):
        assert client.delete("/images/never").status_code == 404


class TestServiceQuery:
    def seed(self, client):
        client.post("/cases", json=record("PMC7234567").to_dict())
        client.post("/cases", json=record(
            "PMC8456123", diagnosis_raw="Plexiform ameloblastoma",
            presenting_complaint="maxillary swelling",
            radiological_features="unilocular radiolucency",
        ).to_dict())
        client.post("/index/rebuild")

    def test_scenario_query_exposes_summary_fields(self, client):
        self.seed(client)
        response = client.post("/query", json={"mode": "free_text", "text": SCENARIO, "k": 5})
        assert response.status_code == 200
        body = response.json()
        assert body["method"] in ("dense", "sparse", "keyword")
        assert body["results"], "expected at least one ranked case"
        top = body["results"][0]
        assert top["pmcid"] == "PMC7234567"
        assert 0.0 <= top["similarity"] <= 1.0
        summary = top["summary"]
        assert set(summary) == {
            "diagnosis", "treatment", "tumor_size_mm",
            "patient_age", "patient_gender", "reference_id",
        }

    def test_structured_form_query(self, client):
        self.seed(client)
        response = client.post("/query", json={
            "mode": "structured_form",
            "form": {"pmcid": "PMC0", "diagnosis_raw": "plexiform ameloblastoma"},
            "k": 1,
        })
        assert response.status_code == 200
        assert response.json()["results"][0]["pmcid"] == "PMC8456123"

    def test_empty_query_400(self, client):
        self.seed(client)
        response = client.post("/query", json={"mode": "free_text", "text": "  "})
        assert response.status_code == 400
        assert response.json()["code"] == "empty_query"

    def test_query_on_empty_repository(self, client):
        response = client.post("/query", json={"mode": "free_text", "text": "swelling"})
        assert response.status_code == 200
        assert response.json() == {"results": [], "method": None}

    def test_mutations_need_rebuild_to_reach_queries(self, client):
        self.seed(client)
        client.post("/cases", json=record("PMC9999999",
                                          presenting_complaint="entirely novel words").to_dict())
        before = client.post("/query", json={"mode": "free_text", "text": SCENARIO, "k": 10})
        assert all(r["pmcid"] != "PMC9999999" for r in before.json()["results"])
        client.post("/index/rebuild")
        after = client.post("/query", json={"mode": "free_text", "text": SCENARIO, "k": 10})
        assert any(r["pmcid"] == "PMC9999999" for r in after.json()["results"])

    def test_rebuild_reports_count(self, client):
        self.seed(client)
        assert client.post("/index/rebuild").json() == {"indexed": 2}

    def test_503_during_blocking_rebuild(self, tmp_path):
        config = ServiceConfig(store_dir=tmp_path / "store", blocking_rebuild=True)
        app = create_app(config)
        with TestClient(app) as c:
            c.post("/cases", json=record("PMC1").to_dict())
            app.state.rebuilding = True
            response = c.post("/query", json={"mode": "free_text", "text": "swelling"})
            assert response.status_code == 503
            assert response.json()["code"] == "index_rebuilding"


class TestServiceIngestAndBench:
    def test_ingest_embeddings_and_dense_query(self, client):
        client.post("/cases", json=record("PMC1").to_dict())
        client.post("/cases", json=record("PMC2").to_dict())
        lines = "\n".join([
            json.dumps({"pmcid": "PMC1", "vector": [1.0, 0.0, 0.0, 0.0]}),
            json.dumps({"pmcid": "PMC2", "vector": [0.0, 1.0, 0.0, 0.0]}),
        ])
        response = client.post("/embeddings/ingest", content=lines)
        assert response.status_code == 200
        assert response.json() == {"ingested": 2}
        client.post("/index/rebuild")

        body = client.post("/query", json={
            "mode": "free_text",
            "text": "painless swelling of the right mandible lesion",
            "k": 1,
            "vector": [1.0, 0.0, 0.0, 0.0],
        }).json()
        assert body["method"] == "dense"
        assert body["results"][0]["pmcid"] == "PMC1"
        assert body["results"][0]["similarity"] == pytest.approx(1.0)

    def test_dimension_mismatch_rejected(self, client):
        client.post("/cases", json=record("PMC1").to_dict())
        ok = json.dumps({"pmcid": "PMC1", "vector": [1.0, 0.0]})
        bad = json.dumps({"pmcid": "PMC1", "vector": [1.0, 0.0, 0.0]})
        assert client.post("/embeddings/ingest", content=ok).status_code == 200
        response = client.post("/embeddings/ingest", content=bad)
        assert response.status_code == 400
        assert response.json()["code"] == "schema_violation"

    def test_embeddings_survive_restart(self, tmp_path):
        config = ServiceConfig(store_dir=tmp_path / "store")
        with TestClient(create_app(config)) as c:
            c.post("/cases", json=record("PMC1").to_dict())
            c.post("/embeddings/ingest",
                   content=json.dumps({"pmcid": "PMC1", "vector": [1.0, 0.0]}))
        with TestClient(create_app(config)) as c2:
            body = c2.post("/query", json={
                "mode": "free_text",
                "text": "painless swelling right mandible radiolucent lesion",
                "vector": [1.0, 0.0],
            }).json()
            assert body["method"] == "dense"

    def test_bench_latest_404_then_served(self, client, tmp_path):
        assert client.get("/bench/latest").status_code == 404
        store_dir = tmp_path / "store"
        (store_dir / "bench_latest.json").write_text(json.dumps({"reports": []}))
        assert client.get("/bench/latest").json() == {"reports": []}
