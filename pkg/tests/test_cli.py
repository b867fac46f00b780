import json
import os

import pytest
from click.testing import CliRunner

from backend.cli import cli, main
from backend.database.manifest_store import ManifestStore
from backend.evaluation.regions import Region

SMALL = ['--k-true', '2', '--per-cluster', '20', '--d-f', '4', '--separation', '8',
         '--images', '8', '--per-image', '6', '--seed', '7']
FAST = ['--outer-iters', '5', '--mf-sweeps', '10']


@pytest.fixture
def run(tmp_path):
    runner = CliRunner()

    def invoke(*args):
        return runner.invoke(cli, ['--quiet', '--log-file', str(tmp_path / 'coseg.log')] + list(args))

    return invoke


def pipeline(run, workdir, threads='1'):
    def path(name):
        return str(workdir / name)

    steps = [
        ['synth', '--output', path('synth.jsonl')] + SMALL,
        ['train', path('synth.jsonl'), '--output', path('model.json'), '--k', '2', '--threads', threads] + FAST,
        ['infer', path('model.json'), path('synth.jsonl'), '--output', path('dist.json'), '--threads', threads],
        ['eval', path('dist.selections.json'), path('synth.jsonl'), '--output', path('score.json'),
         '--truth', path('synth.truth.json'), '--distributions', path('dist.json')],
    ]
    for args in steps:
        result = run(*args)
        assert result.exit_code == 0, (args[0], result.output)


class TestPipeline:
    def test_end_to_end(self, run, tmp_path):
        pipeline(run, tmp_path)

        for name in ('synth.jsonl', 'synth.truth.json', 'model.json', 'model.progress.jsonl',
                     'dist.json', 'dist.csv', 'dist.selections.json', 'score.json', 'score.csv'):
            assert (tmp_path / name).exists(), name

        score = json.loads((tmp_path / 'score.json').read_text())
        assert 0.0 <= score['score'] <= 1.0
        assert score['class_name'] == 'foreground'
        assert score['ari'] > 0.9
        assert score['provenance']['command'] == 'eval'

        model = json.loads((tmp_path / 'model.json').read_text())
        assert model['format_version'] == 1
        assert model['config']['K'] == 2
        assert 'threads' not in model['config']

    def test_featurize_2d_rewrites_interactions(self, run, tmp_path):
        assert run('synth', '--output', str(tmp_path / 'synth.jsonl'), *SMALL).exit_code == 0
        result = run('featurize', str(tmp_path / 'synth.jsonl'), '--output', str(tmp_path / 'feat.jsonl'),
                     '--mode', '2d')
        assert result.exit_code == 0, result.output
        dataset, header = ManifestStore().read_manifest(str(tmp_path / 'feat.jsonl'))
        assert header['featurizer']['d_h'] == 36
        assert all(len(p.interaction) == 36 for image in dataset for p in image.proposals)

    @pytest.mark.slow
    def test_worker_count_does_not_change_outputs(self, run, tmp_path):
        one, many = tmp_path / 'one', tmp_path / 'many'
        one.mkdir()
        many.mkdir()
        pipeline(run, one, threads='1')
        pipeline(run, many, threads='8')

        for name in sorted(os.listdir(one)):
            if name.endswith('.progress.jsonl'):
                continue
            assert (one / name).read_bytes() == (many / name).read_bytes(), name


class TestErrors:
    def test_more_clusters_than_proposals(self, run, tmp_path):
        assert run('synth', '--output', str(tmp_path / 'synth.jsonl'), *SMALL).exit_code == 0
        result = run('train', str(tmp_path / 'synth.jsonl'), '--output', str(tmp_path / 'model.json'),
                     '--k', '500')
        assert result.exit_code == 1
        assert '✗ train' in result.output
        assert not (tmp_path / 'model.json').exists()

    def test_invalid_dataset_exits_with_2(self, run, tmp_path):
        bad = {'image_id': 'a', 'width': 10, 'height': 10,
               'proposals': [{'image_id': 'a', 'proposal_id': 'p', 'bbox': [0, 0, 20, 20],
                              'appearance': [1.0], 'interaction': [0.0] * 15}]}
        (tmp_path / 'bad.jsonl').write_text(json.dumps(bad) + '\n')
        result = run('train', str(tmp_path / 'bad.jsonl'), '--output', str(tmp_path / 'model.json'), '--k', '1')
        assert result.exit_code == 2
        assert 'bbox-bounds' in result.output

    def test_featurize_rejects_incomplete_skeletons(self, run, tmp_path):
        image = {'image_id': 'a', 'width': 10, 'height': 10,
                 'proposals': [{'image_id': 'a', 'proposal_id': 'p', 'bbox': [0, 0, 5, 5],
                                'appearance': [1.0]}],
                 'humans': [{'joints': {'head': [0.0, 0.0, 1.0], 'neck': [0.0, 0.1, 1.0]}}]}
        (tmp_path / 'raw.jsonl').write_text(json.dumps(image) + '\n')
        result = run('featurize', str(tmp_path / 'raw.jsonl'), '--output', str(tmp_path / 'feat.jsonl'))
        assert result.exit_code == 2
        assert 'skeleton-missing-joint' in result.output
        assert not (tmp_path / 'feat.jsonl').exists()

    def test_usage_error_returns_1(self, tmp_path):
        assert main(['--log-file', str(tmp_path / 'coseg.log'), 'train']) == 1

    def test_bad_flag_value(self, run, tmp_path):
        result = run('synth', '--output', str(tmp_path / 's.jsonl'), '--sigma', '0')
        assert result.exit_code == 1


class TestEval:
    def test_identical_selection_scores_one(self, run, tmp_path):
        assert run('synth', '--output', str(tmp_path / 'synth.jsonl'), *SMALL).exit_code == 0
        store = ManifestStore()
        dataset, _ = store.read_manifest(str(tmp_path / 'synth.jsonl'))
        images = {}
        for image in dataset:
            gt = image.ground_truth.get('foreground')
            if gt is not None:
                region = Region.from_ground_truth(gt, image.width, image.height)
                images[image.image_id] = [{'cluster': 0, 'proposal_ids': [], 'confidence': [],
                                           'region': region.to_dict()}]
        store.write_document(str(tmp_path / 'sel.json'), {'K': 1, 'mode': 'union', 'images': images})

        result = run('eval', str(tmp_path / 'sel.json'), str(tmp_path / 'synth.jsonl'),
                     '--output', str(tmp_path / 'score.json'))
        assert result.exit_code == 0, result.output
        assert json.loads((tmp_path / 'score.json').read_text())['score'] == 1.0


def test_verify_command(run, tmp_path):
    result = run('verify', '--instances', '4', '--output', str(tmp_path / 'verify.json'))
    assert result.exit_code == 0, result.output
    assert json.loads((tmp_path / 'verify.json').read_text())['passed'] is True


def test_sweep_command(run, tmp_path):
    assert run('synth', '--output', str(tmp_path / 'synth.jsonl'), *SMALL).exit_code == 0
    result = run('sweep-k', str(tmp_path / 'synth.jsonl'), '--ks', '1,2', '--output',
                 str(tmp_path / 'sweep.json'), *FAST)
    assert result.exit_code == 0, result.output
    rows = json.loads((tmp_path / 'sweep.json').read_text())['rows']
    assert [row['K'] for row in rows] == [1, 2]
