import os

import numpy as np
import pandas as pd
import pytest

from backend.core.errors import DatasetValidationError
from backend.database.manifest_store import ManifestStore


@pytest.fixture
def store(tmp_path):
    return ManifestStore(str(tmp_path))


class TestManifests:
    def test_roundtrip_with_header(self, store, small_planted):
        store.write_manifest('data.jsonl', small_planted.dataset, header={'seed': 7})
        dataset, header = store.read_manifest('data.jsonl')

        assert header == {'seed': 7}
        assert [im.to_dict() for im in dataset] == [im.to_dict() for im in small_planted.dataset]
        np.testing.assert_array_equal(dataset[0].proposals[0].appearance,
                                      small_planted.dataset[0].proposals[0].appearance)

    def test_rewrite_is_byte_identical(self, store, small_planted, tmp_path):
        store.write_manifest('a.jsonl', small_planted.dataset)
        dataset, _ = store.read_manifest('a.jsonl')
        store.write_manifest('b.jsonl', dataset)
        assert (tmp_path / 'a.jsonl').read_bytes() == (tmp_path / 'b.jsonl').read_bytes()

    def test_no_temporary_files_left(self, store, small_planted, tmp_path):
        store.write_manifest('data.jsonl', small_planted.dataset)
        assert os.listdir(tmp_path) == ['data.jsonl']

    def test_invalid_line(self, store, tmp_path):
        (tmp_path / 'bad.jsonl').write_text('{"image_id": "a", "width": 2}\n{not json\n')
        with pytest.raises(DatasetValidationError) as excinfo:
            store.read_manifest('bad.jsonl')
        assert 'bad.jsonl:1' in str(excinfo.value)


class TestDocuments:
    def test_document_with_provenance(self, store):
        store.write_document('out.json', {'score': 0.5}, provenance={'command': 'eval'})
        assert store.read_document('out.json') == {'score': 0.5, 'provenance': {'command': 'eval'}}

    def test_numpy_values_are_serialized(self, store):
        store.write_document('np.json', {'a': np.arange(3), 'b': np.float64(0.25)})
        assert store.read_document('np.json') == {'a': [0, 1, 2], 'b': 0.25}

    def test_model_version_is_checked(self, store):
        store.write_model('model.json', {'format_version': 99})
        with pytest.raises(DatasetValidationError):
            store.read_model('model.json')

    def test_frame_export(self, store, tmp_path):
        store.write_frame('table.csv', pd.DataFrame({'K': [2, 3], 'score': [0.5, 0.75]}))
        assert (tmp_path / 'table.csv').read_text() == 'K,score\n2,0.5\n3,0.75\n'
