"""
Management command to run the stacked triple-difference event study.

Writes per-stack estimates, the aggregated event study with pointwise CIs,
realized weights, variances, the simultaneous band (when --bootstrap-B > 0)
and per-stack pre-trend tests.

Usage:
    python manage.py ddd_estimate --input panel.csv --L 3 --K 2 --out results/
    python manage.py ddd_estimate --input panel.csv --weights cohort --bootstrap-B 0
    python manage.py ddd_estimate --config results/resolved_config.json
"""
import pandas as pd

from cli.base import DDDCommand
from cli.export_utils import write_outputs
from diagnostics.pretrends import pretrend_covariance, pretrend_test
from estimators.pipeline import run_event_study


class Command(DDDCommand):
    help = 'Estimate a stacked triple-difference event study'

    def add_arguments(self, parser):
        self.add_input_arguments(parser)
        self.add_window_arguments(parser)
        parser.add_argument('--rule', help='Comparison rule: never, earliest or explicit:G')
        parser.add_argument('--weights', help='Weight scheme: fwl, cohort, equal, precision or custom:FILE')
        parser.add_argument('--alpha', type=float, help='Level for CIs and bands (default 0.05)')
        parser.add_argument('--bootstrap-B', type=int, dest='bootstrap_B', help='Bootstrap replications; 0 disables the band')
        parser.add_argument('--multiplier', help='Bootstrap multiplier: rademacher or gaussian')
        parser.add_argument('--seed', type=int, help='Bootstrap seed')
        parser.add_argument('--n-jobs', type=int, dest='n_jobs', help='Parallel bootstrap workers')
        parser.add_argument('--on-infeasible', dest='on_infeasible', help='skip or error')
        self.add_output_arguments(parser)

    def run(self, options):
        config = self.resolve(options)
        resolved = config.resolved()
        ds = self.load(config)

        run = run_event_study(
            ds,
            rule=resolved['rule'],
            L=resolved['L'],
            K=resolved['K'],
            scheme=resolved['weights'],
            alpha=resolved['alpha'],
            B=resolved['bootstrap_B'],
            multiplier=resolved['multiplier'],
            seed=resolved['seed'],
            n_jobs=resolved['n_jobs'],
            on_infeasible=resolved['on_infeasible'],
        )
        out, formats = resolved['out'], resolved['formats']

        tables = run.result.tables
        stack_frame = pd.concat([table.to_frame() for table in tables], ignore_index=True) if tables else None
        write_outputs(out, 'stack_att', formats, {'stacks': [t.to_dict() for t in tables]}, stack_frame)
        write_outputs(out, 'event_study', formats, run.to_dict(), run.event_study_frame())
        write_outputs(out, 'weights', formats, run.result.to_dict(), run.result.to_frame())

        covariance = pretrend_covariance(list(run.stacks), ds, tables)
        reports = {
            str(table.g): pretrend_test([table], covariance=covariance).to_dict()
            for table in tables if table.pre_periods()
        }
        if reports:
            joint = pretrend_test(tables, covariance=covariance)
            write_outputs(out, 'pretrends', formats, {'per_stack': reports, 'joint': joint.to_dict()})
        self.echo_config(out, resolved)

        for key in sorted(run.stacks.skipped):
            self.stdout.write(self.style.WARNING(f'  ⚠ Cohort {key} skipped: {run.stacks.skipped[key]}'))
        for e in run.result.event_times():
            lower, upper = run.cis[e]
            self.stdout.write(f'  e={e:+d}: {run.result.estimate(e):.6f}  [{lower:.6f}, {upper:.6f}]')
        if run.band is not None:
            self.stdout.write(f'  Simultaneous band critical value: {run.band.critical_value:.4f}')
        self.stdout.write(self.style.SUCCESS(f'✓ Estimated {len(run.stacks)} stack(s); outputs in {out}'))
