import json

import pytest

from amelo.cli import main, parse_args

SCENARIO = (
    "Painless swelling in right mandible, gradually enlarging over 8 months. "
    "Firm, non-tender with intact mucosa. "
    "Radiograph shows multilocular radiolucent lesion from first molar to ramus."
)


def case_payloads():
    return [
        {
            "pmcid": "PMC7234567",
            "patient_age": 47,
            "patient_gender": "male",
            "presenting_complaint": "painless swelling of the right mandible",
            "radiological_features": "multilocular radiolucent lesion from molar to ramus",
            "diagnosis_raw": "Follicular ameloblastoma",
            "treatment": "segmental mandibulectomy",
            "tumor_size_mm": [45.0, 32.0],
        },
        {
            "pmcid": "PMC8456123",
            "patient_age": 39,
            "patient_gender": "female",
            "presenting_complaint": "maxillary swelling",
            "diagnosis_raw": "Plexiform ameloblastoma",
            "treatment": "partial maxillectomy",
            "tumor_size_mm": [38.0],
        },
    ]


def seeded_store(tmp_path, capsys=None):
    cases_file = tmp_path / "cases.json"
    cases_file.write_text(json.dumps(case_payloads()))
    store_dir = tmp_path / "store"
    assert main(["ingest", "--store", str(store_dir), "--cases", str(cases_file)]) == 0
    if capsys is not None:
        capsys.readouterr()  # drop the ingest summary line
    return store_dir


class TestParseArgs:
    def test_query_command(self):
        args = parse_args(["query", "--store", "s", "--text", "swelling", "--k", "5"])
        assert args.command == "query"
        assert args.k == 5

    def test_k_defaults_to_five(self):
        args = parse_args(["query", "--store", "s", "--text", "swelling"])
        assert args.k == 5

    def test_missing_subcommand_usage_error(self):
        with pytest.raises(SystemExit) as err:
            parse_args(["--k", "5"])
        assert err.value.code == 2

    def test_unknown_flag_usage_error(self):
        with pytest.raises(SystemExit) as err:
            parse_args(["query", "--store", "s", "--bogus"])
        assert err.value.code == 2

    def test_bench_methods_flag(self):
        args = parse_args(["bench", "--store", "s", "--methods", "flat,sparse"])
        assert args.methods == "flat,sparse"

    def test_help_exits_zero(self):
        with pytest.raises(SystemExit) as err:
            parse_args(["--help"])
        assert err.value.code == 0

    def test_store_defaults_from_environment(self, monkeypatch):
        monkeypatch.setenv("AMELO_STORE_DIR", "/data/store")
        monkeypatch.setenv("AMELO_PORT", "9000")
        args = parse_args(["serve"])
        assert args.store == "/data/store"
        assert args.port == 9000

    def test_store_required_without_environment(self, monkeypatch):
        monkeypatch.delenv("AMELO_STORE_DIR", raising=False)
        with pytest.raises(SystemExit) as err:
            parse_args(["query", "--text", "swelling"])
        assert err.value.code == 2


class TestExtract:
    def test_scenario_file_populates_tumor_location(self, tmp_path, capsys):
        report = tmp_path / "PMC7234567.txt"
        report.write_text(SCENARIO)
        assert main(["extract", str(report)]) == 0
        out = json.loads(capsys.readouterr().out)
        extraction = out["extractions"]["PMC7234567"]
        assert "right mandible" in extraction["tumor_location"]["text"]
        assert out["schema_version"] == 1

    def test_extract_to_file(self, tmp_path):
        report = tmp_path / "PMC1.txt"
        report.write_text(SCENARIO)
        out_file = tmp_path / "out.json"
        assert main(["extract", str(report), "--out", str(out_file)]) == 0
        assert "PMC1" in json.loads(out_file.read_text())["extractions"]


class TestIngestAndQuery:
    def test_round_trip(self, tmp_path, capsys):
        store_dir = seeded_store(tmp_path, capsys)
        code = main(["query", "--store", str(store_dir), "--text", SCENARIO, "--json"])
        assert code == 0
        out = json.loads(capsys.readouterr().out)
        assert out["results"][0]["pmcid"] == "PMC7234567"
        assert out["method"] in ("sparse", "keyword", "dense")

    def test_json_output_byte_identical(self, tmp_path, capsys):
        store_dir = seeded_store(tmp_path, capsys)
        main(["query", "--store", str(store_dir), "--text", SCENARIO, "--json"])
        first = capsys.readouterr().out
        main(["query", "--store", str(store_dir), "--text", SCENARIO, "--json"])
        second = capsys.readouterr().out
        assert first == second

    def test_human_table_output(self, tmp_path, capsys):
        store_dir = seeded_store(tmp_path, capsys)
        assert main(["query", "--store", str(store_dir), "--text", "maxillary swelling"]) == 0
        out = capsys.readouterr().out
        assert "method:" in out
        assert "similarity=" in out

    def test_form_file_query(self, tmp_path, capsys):
        store_dir = seeded_store(tmp_path, capsys)
        form = tmp_path / "form.json"
        form.write_text(json.dumps({"diagnosis_raw": "plexiform ameloblastoma"}))
        assert main(["query", "--store", str(store_dir), "--form-file", str(form), "--json"]) == 0
        out = json.loads(capsys.readouterr().out)
        assert out["results"][0]["pmcid"] == "PMC8456123"

    def test_text_and_form_mutually_exclusive(self, tmp_path, capsys):
        store_dir = seeded_store(tmp_path, capsys)
        assert main(["query", "--store", str(store_dir)]) == 2

    def test_invalid_case_rejected_at_ingest(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps([{"pmcid": "7234567"}]))
        code = main(["ingest", "--store", str(tmp_path / "s"), "--cases", str(bad)])
        assert code == 1
        assert "PMC prefix" in capsys.readouterr().err


class TestBuildIndex:
    def test_empty_store_exit_1(self, tmp_path, capsys):
        code = main(["build-index", "--store", str(tmp_path / "empty")])
        assert code == 1
        assert "EmptyInput" in capsys.readouterr().err

    def test_persists_index_files(self, tmp_path, capsys):
        store_dir = seeded_store(tmp_path, capsys)
        assert main(["build-index", "--store", str(store_dir)]) == 0
        assert (store_dir / "sparse.amci").exists()
        assert (store_dir / "tfidf.json").exists()
        assert (store_dir / "clustered.amci").exists()

        from amelo.index import load_index

        sparse = load_index(store_dir / "sparse.amci")
        assert sparse.count == 2


class TestBench:
    def test_bench_writes_report_and_csv(self, tmp_path, capsys):
        store_dir = seeded_store(tmp_path, capsys)
        code = main(["bench", "--store", str(store_dir), "--methods", "sparse,keyword",
                     "--repetitions", "1", "--csv"])
        assert code == 0
        out = capsys.readouterr().out
        assert out.startswith("method,")
        saved = json.loads((store_dir / "bench_latest.json").read_text())
        assert {r["method"] for r in saved["reports"]} == {"keyword", "sparse"}
        assert 0.0 <= saved["similarity_quality"]["average"] <= 1.0

    def test_bench_table_default(self, tmp_path, capsys):
        store_dir = seeded_store(tmp_path, capsys)
        assert main(["bench", "--store", str(store_dir), "--methods", "sparse",
                     "--repetitions", "1"]) == 0
        assert "Total Time (s)" in capsys.readouterr().out

    def test_scaling_probe_mode(self, tmp_path, capsys):
        code = main(["bench", "--store", str(tmp_path / "s"), "--sizes", "200,400", "--json"])
        assert code == 0
        out = json.loads(capsys.readouterr().out)
        assert out["scaling"]["sizes"] == [200, 400]
