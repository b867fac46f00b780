"""
cli.py
------
Command-line entry point for the co-segmentation pipeline.

Commands:
- synth:     planted synthetic dataset -> manifest + planted truth
- featurize: raw manifest -> manifest with interaction features
- train:     featurized manifest -> model file (+ JSON-lines progress log)
- infer:     model + manifest -> per-proposal distributions + foreground selections
- eval:      selections + ground truth -> score report (+ ARI vs planted labels)
- verify:    oracle agreement suite on small random instances
- sweep-k:   retrain and score over several cluster counts

Exit codes: 0 success, 1 usage/config error, 2 data validation failure,
3 numerical failure.

Usage:
    python -m backend.cli synth --output data/synth.jsonl
    python -m backend.cli train data/synth.jsonl --output data/model.json
"""

import functools
import logging
import os
import sys

import click

from backend.config import Config
from backend.core.errors import CosegError, DatasetValidationError, NumericalError
from backend.core.models import DEFAULT_TOPOLOGY, SkeletonTopology, TrainConfig
from backend.core.validation import require_valid, validate_dataset
from backend.data_collection.raw_ingest import CameraIntrinsics, FeaturizeSettings, featurize_dataset
from backend.data_collection.synth_generator import SynthSpec, bayes_accuracy, generate
from backend.database.manifest_store import ManifestStore
from backend.evaluation.coseg_metric import adjusted_rand, coseg_score, ground_truth_regions
from backend.evaluation.regions import Region
from backend.processing.autoencoder_trainer import (
    ProposalDistributions, TrainedModel, infer, select_foregrounds, sweep_clusters, train,
)
from backend.processing.hoi_features import CylinderBinning
from backend.processing.oracle import run_verification

logger = logging.getLogger(__name__)


def setup_logging(log_file: str, level: str):
    logging.basicConfig(
        filename=log_file,
        level=getattr(logging, level.upper(), logging.INFO),
        format="%(asctime)s - %(levelname)s - %(message)s"
    )


def stage(name):
    """Turn backend errors into a one-line diagnostic and the matching exit code."""
    def decorate(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            try:
                return fn(*args, **kwargs)
            except CosegError as e:
                logger.error(f'{name} failed: {e}')
                click.echo(f'✗ {name}: {e}', err=True)
                for violation in getattr(e, 'violations', [])[:20]:
                    click.echo(f'    {violation}', err=True)
                raise click.exceptions.Exit(e.exit_code)
            except OSError as e:
                logger.error(f'{name} failed: {e}')
                click.echo(f'✗ {name}: {e}', err=True)
                raise click.exceptions.Exit(1)
        return wrapper
    return decorate


def echo(ctx, message=''):
    if not ctx.obj['silent']:
        click.echo(message)


def banner(ctx, title):
    echo(ctx, '\n' + '=' * 60)
    echo(ctx, title)
    echo(ctx, '=' * 60)


def provenance(command, config=None, inputs=(), **extra) -> dict:
    """Settings that reproduce an output file. Inputs are recorded by file name only."""
    out = {'command': command, 'inputs': [os.path.basename(p) for p in inputs]}
    if config is not None:
        out['config'] = config.to_dict()
        out['seed'] = config.seed
    out.update(extra)
    return out


def sibling(path, suffix) -> str:
    stem, _ = os.path.splitext(path)
    return stem + suffix


# ============================================
# SHARED TRAINING OPTIONS
# ============================================

def train_options(fn):
    options = [
        click.option('--k', type=int, default=None, help='Number of clusters.'),
        click.option('--seed', type=int, default=None, help='Initialization seed.'),
        click.option('--delta-f', default=None, help='Appearance bandwidth (number or "auto").'),
        click.option('--delta-h', default=None, help='Interaction bandwidth (number or "auto").'),
        click.option('--reg', 'reg_lambda', type=float, default=None, help='L2 weight on lambda.'),
        click.option('--lr', 'learning_rate', type=float, default=None, help='Adagrad base step.'),
        click.option('--outer-iters', type=int, default=None),
        click.option('--mf-sweeps', 'mf_max_sweeps', type=int, default=None),
        click.option('--mf-tol', type=float, default=None),
        click.option('--mf-contraction', type=float, default=None,
                     help='Largest allowed per-sweep contraction factor, in (0, 1).'),
        click.option('--foreground-mode', type=click.Choice(['top1', 'union']), default=None),
        click.option('--object-only', is_flag=True, default=False,
                     help='Drop the interaction channel (appearance-only model).'),
        click.option('--threads', type=int, default=None, help='Worker cap; results do not depend on it.'),
    ]
    for option in reversed(options):
        fn = option(fn)
    return fn


def build_config(object_only=False, k=None, **overrides) -> TrainConfig:
    config = TrainConfig.from_env().replace(K=k, **overrides)
    if object_only:
        config = config.replace(use_interaction=False)
    return config.validate()


# ============================================
# COMMAND GROUP
# ============================================

@click.group()
@click.option('--quiet', is_flag=True, default=False, help='Suppress progress output.')
@click.option('--log-file', default=Config.LOG_FILE, show_default=True)
@click.option('--log-level', default=Config.LOG_LEVEL, show_default=True)
@click.pass_context
def cli(ctx, quiet, log_file, log_level):
    """Human-object co-segmentation with a fully connected CRF auto-encoder."""
    setup_logging(log_file, log_level)
    ctx.obj = {'silent': quiet, 'store': ManifestStore()}


@cli.command()
@click.option('--output', required=True, help='Dataset manifest to write (.jsonl).')
@click.option('--truth', default=None, help='Planted truth document (default: <output>.truth.json).')
@click.option('--k-true', type=int, default=3, show_default=True)
@click.option('--per-cluster', type=int, default=67, show_default=True)
@click.option('--d-f', type=int, default=8, show_default=True)
@click.option('--separation', type=float, default=6.0, show_default=True, help='Center distance in sigmas.')
@click.option('--sigma', type=float, default=1.0, show_default=True)
@click.option('--signal', type=float, default=1.0, show_default=True, help='Interaction signal strength.')
@click.option('--images', type=int, default=20, show_default=True)
@click.option('--per-image', type=int, default=12, show_default=True)
@click.option('--seed', type=int, default=Config.SEED, show_default=True)
@click.pass_context
@stage('synth')
def synth(ctx, output, truth, k_true, per_cluster, d_f, separation, sigma, signal, images, per_image, seed):
    """Generate a planted synthetic dataset."""
    store = ctx.obj['store']
    spec = SynthSpec(K_true=k_true, proposals_per_cluster=per_cluster, d_f=d_f, separation=separation,
                     sigma=sigma, signal_strength=signal, n_images=images,
                     proposals_per_image=per_image, seed=seed)
    banner(ctx, 'SYNTHETIC DATASET')
    planted = generate(spec)
    store.write_manifest(output, planted.dataset, header={'synth': spec.to_dict(), 'seed': seed})

    truth = truth or sibling(output, '.truth.json')
    document = planted.to_truth_dict()
    document['bayes_accuracy'] = bayes_accuracy(spec)
    store.write_document(truth, document, provenance('synth', synth=spec.to_dict(), seed=seed))

    echo(ctx, f"✓ {spec.n_proposals} proposals in {len(planted.dataset)} images -> {output}")
    echo(ctx, f"  Bayes accuracy {document['bayes_accuracy']:.4f}, truth -> {truth}")


@cli.command()
@click.argument('manifest', type=click.Path(exists=True, dir_okay=False))
@click.option('--output', required=True, help='Featurized manifest to write.')
@click.option('--mode', type=click.Choice(['3d', '2d']), default='3d', show_default=True)
@click.option('--intrinsics', type=click.Path(exists=True, dir_okay=False), default=None,
              help='JSON file with fx, fy, cx, cy, depth_scale.')
@click.option('--grid', default=None, help='Fallback proposals for images without any, e.g. 4x4.')
@click.option('--cylinder-radius', type=float, default=Config.CYLINDER_RADIUS, show_default=True)
@click.option('--inner-fraction', type=float, default=Config.INNER_FRACTION, show_default=True)
@click.option('--threads', type=int, default=Config.THREADS, show_default=True)
@click.pass_context
@stage('featurize')
def featurize(ctx, manifest, output, mode, intrinsics, grid, cylinder_radius, inner_fraction, threads):
    """Compute interaction features for a raw manifest."""
    store = ctx.obj['store']
    dataset, header = store.read_manifest(manifest)

    camera = None
    if intrinsics is not None:
        camera = CameraIntrinsics.from_dict(store.read_document(intrinsics))
    elif header.get('intrinsics'):
        camera = CameraIntrinsics.from_dict(header['intrinsics'])
    topology = SkeletonTopology.from_list(header['topology']) if header.get('topology') else DEFAULT_TOPOLOGY
    if mode == '3d':
        gaps = [v for v in validate_dataset(dataset, threads=threads, topology=topology)
                if v.rule == 'skeleton-missing-joint']
        if gaps:
            raise DatasetValidationError(f'{len(gaps)} skeletons lack topology joints: {gaps[0]}', gaps)

    grid_shape = None
    if grid:
        try:
            rows, cols = (int(v) for v in grid.lower().split('x'))
        except ValueError:
            raise click.BadParameter(f'expected ROWSxCOLS, got {grid!r}', param_hint='--grid')
        grid_shape = (rows, cols)

    settings = FeaturizeSettings(
        mode=mode,
        topology=topology,
        binning=CylinderBinning(inner_exclusion_fraction=inner_fraction, max_radius=cylinder_radius),
        intrinsics=camera,
        grid=grid_shape,
        depth_root=os.path.dirname(os.path.abspath(manifest)),
    )
    featurized, report = featurize_dataset(dataset, settings, threads=threads, silent=ctx.obj['silent'])

    violations = validate_dataset(featurized, threads=threads)
    if violations:
        logger.warning(f'Featurized dataset has {len(violations)} violations')
        echo(ctx, f"⚠️  {len(violations)} validation issues (run train to see them)")

    header = dict(header)
    header.update({'featurizer': settings.to_dict(), 'featurize_report': report.to_dict()})
    store.write_manifest(output, featurized, header=header)
    echo(ctx, f"✓ Featurized manifest -> {output}")


@cli.command(name='train')
@click.argument('manifest', type=click.Path(exists=True, dir_okay=False))
@click.option('--output', required=True, help='Model file to write (.json).')
@click.option('--progress', default=None, help='JSON-lines progress log (default: <output>.progress.jsonl).')
@train_options
@click.pass_context
@stage('train')
def train_command(ctx, manifest, output, progress, object_only, **overrides):
    """Learn encoder and reconstruction parameters."""
    store = ctx.obj['store']
    config = build_config(object_only, **overrides)
    dataset, _ = store.read_manifest(manifest)
    require_valid(dataset, threads=config.threads)

    banner(ctx, f'TRAINING (K={config.K}, seed={config.seed})')
    progress = progress or sibling(output, '.progress.jsonl')
    model = train(dataset, config, progress_path=progress, silent=ctx.obj['silent'])
    store.write_model(output, model.to_dict())

    for row in model.trace:
        echo(ctx, f"  iter {row['iteration']:3d}  objective {row['objective']:.6f}  "
                  f"mean-field sweeps {row['sweeps']}")
    echo(ctx, f"✓ Model -> {output} ({len(model.trace)} iterations), progress -> {progress}")


@cli.command(name='infer')
@click.argument('model_path', type=click.Path(exists=True, dir_okay=False))
@click.argument('manifest', type=click.Path(exists=True, dir_okay=False))
@click.option('--output', required=True, help='Per-proposal distributions (.json, with a .csv sibling).')
@click.option('--selections', default=None, help='Foreground selections (default: <output>.selections.json).')
@click.option('--foreground-mode', type=click.Choice(['top1', 'union']), default=None)
@click.option('--threads', type=int, default=Config.THREADS, show_default=True)
@click.pass_context
@stage('infer')
def infer_command(ctx, model_path, manifest, output, selections, foreground_mode, threads):
    """Posterior cluster distributions and per-image foreground regions."""
    store = ctx.obj['store']
    model = TrainedModel.from_dict(store.read_model(model_path))
    dataset, _ = store.read_manifest(manifest)
    require_valid(dataset, threads=threads)
    mode = foreground_mode or model.config.foreground_mode

    distributions = infer(model, dataset)
    chosen = select_foregrounds(distributions, dataset, mode)
    inputs = (model_path, manifest)

    document = distributions.to_dict()
    document['K'] = model.K
    store.write_document(output, document, provenance('infer', model.config, inputs))
    store.write_frame(sibling(output, '.csv'), distributions.to_frame())

    selections = selections or sibling(output, '.selections.json')
    store.write_document(selections, {
        'K': model.K,
        'mode': mode,
        'images': {image_id: [s.to_dict() for s in per] for image_id, per in chosen.items()},
    }, provenance('infer', model.config, inputs, foreground_mode=mode))
    echo(ctx, f"✓ {len(distributions.keys)} distributions -> {output}, selections -> {selections}")


@cli.command(name='eval')
@click.argument('selections', type=click.Path(exists=True, dir_okay=False))
@click.argument('manifest', type=click.Path(exists=True, dir_okay=False))
@click.option('--output', required=True, help='Score report (.json, with a per-image .csv sibling).')
@click.option('--class-name', default=None, help='Ground-truth class (default: first in the manifest).')
@click.option('--truth', type=click.Path(exists=True, dir_okay=False), default=None,
              help='Planted truth document; with --distributions adds the adjusted Rand index.')
@click.option('--distributions', type=click.Path(exists=True, dir_okay=False), default=None)
@click.pass_context
@stage('eval')
def eval_command(ctx, selections, manifest, output, class_name, truth, distributions):
    """Score foreground selections against ground truth."""
    store = ctx.obj['store']
    chosen = store.read_document(selections)
    dataset, _ = store.read_manifest(manifest)
    K = int(chosen['K'])

    regions = {
        image_id: {int(s['cluster']): Region.from_dict(s['region']) for s in per}
        for image_id, per in chosen['images'].items()
    }
    class_name, ground_truth = ground_truth_regions(dataset, class_name)
    if not ground_truth:
        raise DatasetValidationError('manifest carries no ground truth to score against')

    report = coseg_score(regions, ground_truth, K)
    report.class_name = class_name

    if truth is not None and distributions is not None:
        planted = store.read_document(truth)
        dist = ProposalDistributions.from_dict(store.read_document(distributions))
        predicted = dict(zip(dist.keys, dist.argmax().tolist()))
        pairs = [(row['label'], predicted[(row['image_id'], row['proposal_id'])])
                 for row in planted['labels'] if (row['image_id'], row['proposal_id']) in predicted]
        if pairs:
            report.ari = adjusted_rand([t for t, _ in pairs], [p for _, p in pairs])

    inputs = [selections, manifest] + [p for p in (truth, distributions) if p]
    store.write_document(output, report.to_dict(),
                         provenance('eval', inputs=inputs, selection_provenance=chosen.get('provenance')))
    store.write_frame(sibling(output, '.csv'), report.to_frame(), index=True)

    echo(ctx, f"✓ {class_name}: score {report.score:.4f} (cluster {report.best_k}) over {len(ground_truth)} images")
    if report.ari is not None:
        echo(ctx, f"  adjusted Rand index {report.ari:.4f}")


@cli.command()
@click.option('--seed', type=int, default=Config.SEED, show_default=True)
@click.option('--instances', type=int, default=20, show_default=True)
@click.option('--output', default=None, help='Optional verification report (.json).')
@click.pass_context
@stage('verify')
def verify(ctx, seed, instances, output):
    """Check mean field and gradients against exhaustive enumeration."""
    banner(ctx, 'ORACLE VERIFICATION')
    result = run_verification(seed=seed, instances=instances)
    for check in result['checks']:
        mark = '✓' if check['passed'] else '✗'
        echo(ctx, f"{mark} {check['check']}: max error {check['max_error']:.3e} "
                  f"(tolerance {check['tolerance']:.0e}, {check['instances']} instances)")
    if output:
        ctx.obj['store'].write_document(output, result, provenance('verify', seed=seed, instances=instances))
    if not result['passed']:
        raise NumericalError('oracle agreement failed')


@cli.command(name='sweep-k')
@click.argument('manifest', type=click.Path(exists=True, dir_okay=False))
@click.option('--ks', default='2,3,4,5,6', show_default=True, help='Comma-separated cluster counts.')
@click.option('--output', required=True, help='Sweep table (.json, with a .csv sibling).')
@click.option('--class-name', default=None)
@train_options
@click.pass_context
@stage('sweep-k')
def sweep_k(ctx, manifest, ks, output, class_name, object_only, **overrides):
    """Score the model over several cluster counts."""
    store = ctx.obj['store']
    try:
        values = [int(v) for v in ks.split(',') if v.strip()]
    except ValueError:
        raise click.BadParameter(f'expected comma-separated integers, got {ks!r}', param_hint='--ks')
    config = build_config(object_only, **overrides)
    dataset, _ = store.read_manifest(manifest)
    require_valid(dataset, threads=config.threads)

    banner(ctx, f'CLUSTER-COUNT SWEEP {values}')
    frame = sweep_clusters(dataset, config, values, class_name, silent=ctx.obj['silent'])
    store.write_document(output, {'rows': frame.to_dict(orient='records')},
                         provenance('sweep-k', config, [manifest], ks=values))
    store.write_frame(sibling(output, '.csv'), frame)
    for row in frame.itertuples():
        echo(ctx, f"  K={row.K}: score {row.score:.4f} (cluster {row.best_k})")


def main(argv=None) -> int:
    """Run the CLI and return its exit code; usage errors map to 1."""
    try:
        rv = cli.main(args=argv, prog_name='coseg', standalone_mode=False)
    except click.exceptions.Abort:
        click.echo('Aborted!', err=True)
        return 1
    except click.ClickException as e:
        e.show()
        return 1
    return rv if isinstance(rv, int) else 0


if __name__ == '__main__':
    sys.exit(main())
