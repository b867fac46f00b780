"""
manifest_store.py
-----------------
Every file the pipeline reads or writes goes through ManifestStore:
- dataset manifests: JSON Lines, one ImageRecord per line, optional
  {"_manifest": {...}} header line first
- model files and result documents: single JSON objects
- CSV exports of tabular results

Writes go to a temporary sibling that is renamed into place, so a failed
run never leaves a truncated file. JSON is written with sorted keys and
Python's shortest round-trip float repr, so reruns are byte-identical.
"""

import json
import logging
import os
import tempfile
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from backend.core.errors import DatasetValidationError
from backend.core.models import FORMAT_VERSION, ImageRecord

logger = logging.getLogger(__name__)

HEADER_KEY = '_manifest'


def _jsonable(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    raise TypeError(f'{type(value).__name__} is not JSON serializable')


def dumps(payload) -> str:
    return json.dumps(payload, sort_keys=True, default=_jsonable)


class ManifestStore:
    def __init__(self, root='.'):
        self.root = root

    def path(self, name) -> str:
        return name if os.path.isabs(name) else os.path.join(self.root, name)

    def _write_text(self, name, text: str) -> str:
        """Atomic write: temp file in the target directory, then rename."""
        target = self.path(name)
        directory = os.path.dirname(os.path.abspath(target))
        os.makedirs(directory, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=directory, prefix='.tmp-', suffix=os.path.basename(target))
        try:
            with os.fdopen(fd, 'w', encoding='utf-8', newline='\n') as handle:
                handle.write(text)
            os.replace(tmp, target)
        except BaseException:
            if os.path.exists(tmp):
                os.remove(tmp)
            raise
        logger.info(f'Wrote {target}')
        return target

    # ============================================
    # DATASET MANIFESTS
    # ============================================

    def write_manifest(self, name, dataset: Sequence[ImageRecord], header: Optional[dict] = None) -> str:
        lines = []
        if header is not None:
            lines.append(dumps({HEADER_KEY: header}))
        lines.extend(dumps(image.to_dict()) for image in dataset)
        return self._write_text(name, '\n'.join(lines) + '\n')

    def read_manifest(self, name) -> Tuple[List[ImageRecord], dict]:
        """
        Returns:
            tuple: (list of ImageRecord, header dict; empty when absent)
        """
        target = self.path(name)
        dataset, header = [], {}
        with open(target, encoding='utf-8') as handle:
            for number, line in enumerate(handle, 1):
                line = line.strip()
                if not line:
                    continue
                try:
                    record = json.loads(line)
                except json.JSONDecodeError as e:
                    raise DatasetValidationError(f'{target}:{number}: invalid JSON ({e.msg})')
                if HEADER_KEY in record:
                    header = record[HEADER_KEY]
                    continue
                try:
                    dataset.append(ImageRecord.from_dict(record))
                except (KeyError, TypeError, ValueError) as e:
                    raise DatasetValidationError(f'{target}:{number}: malformed image record ({e})')
        logger.info(f'Read {len(dataset)} images from {target}')
        return dataset, header

    # ============================================
    # MODELS AND RESULT DOCUMENTS
    # ============================================

    def write_model(self, name, model_dict: dict) -> str:
        return self._write_text(name, dumps(model_dict) + '\n')

    def read_model(self, name) -> dict:
        data = self.read_document(name)
        version = data.get('format_version')
        if version != FORMAT_VERSION:
            raise DatasetValidationError(
                f'model file {self.path(name)} has format_version {version}, expected {FORMAT_VERSION}'
            )
        return data

    def write_document(self, name, payload: dict, provenance: Optional[dict] = None) -> str:
        document = dict(payload)
        if provenance is not None:
            document['provenance'] = provenance
        return self._write_text(name, dumps(document) + '\n')

    def read_document(self, name) -> dict:
        target = self.path(name)
        with open(target, encoding='utf-8') as handle:
            try:
                return json.load(handle)
            except json.JSONDecodeError as e:
                raise DatasetValidationError(f'{target}: invalid JSON ({e.msg})')

    def write_frame(self, name, frame: pd.DataFrame, index: bool = False) -> str:
        return self._write_text(name, frame.to_csv(index=index, lineterminator='\n'))
