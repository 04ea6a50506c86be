"""
Management command to decompose a pooled fixed-effects event study into
implicit cohort weights.

Writes the auxiliary weight table, aggregated post-period weights, the
weight-property report, pooled coefficients and the implied estimand.

Usage:
    python manage.py ddd_decompose --input panel.csv --L 2 --K 2 --out results/
    python manage.py ddd_decompose --input panel.csv --spec plain_3wfe --catt stacked
"""
from cli.base import DDDCommand
from cli.export_utils import write_outputs
from diagnostics.weights import (
    aggregated_weights,
    aux_weights,
    check_weight_properties,
    implied_estimand,
    pooled_3wfe_event_study,
    realized_contrasts,
)
from estimators.aggregation import event_study
from stacked_ddd.exceptions import CoverageError
from stacks.builders import build_widest_stacks

CATT_SOURCES = ('realized', 'stacked')


class Command(DDDCommand):
    help = 'Decompose a pooled event-study regression into implicit weights'

    def add_arguments(self, parser):
        self.add_input_arguments(parser)
        self.add_window_arguments(parser)
        parser.add_argument('--spec', help='hw_style (default) or plain_3wfe')
        parser.add_argument('--rule', help='Comparison rule for --catt stacked')
        parser.add_argument(
            '--catt',
            choices=CATT_SOURCES,
            default='realized',
            help='Effects plugged into the implied estimand: realized cell contrasts or stacked estimates',
        )
        self.add_output_arguments(parser)

    def run(self, options):
        config = self.resolve(options)
        resolved = config.resolved()
        resolved['catt'] = options['catt']
        ds = self.load(config)
        window = (resolved['L'], resolved['K'])
        out, formats = resolved['out'], resolved['formats']

        table = aux_weights(ds, resolved['spec'], window)
        report = check_weight_properties(table)
        write_outputs(out, 'aux_weights', formats, table.to_dict(), table.to_frame())
        write_outputs(out, 'weight_properties', formats, report.to_dict())

        if any(j >= 0 for j in table.event_times_included):
            agg = aggregated_weights(table)
            write_outputs(out, 'agg_weights', formats, agg.to_dict(), agg.to_frame())

        pooled = pooled_3wfe_event_study(ds, resolved['spec'], window)
        if options['catt'] == 'realized':
            catt = realized_contrasts(ds)
        else:
            # Every realized relative time can carry weight, so each cohort gets its widest clean window
            stacks = build_widest_stacks(ds, rule=resolved['rule'])
            tables = event_study(stacks, ds, 'equal').tables if stacks else ()
            catt = {(t.g, e): t.estimate(e) for t in tables for e in t.event_times() if t.feasible(e)}
            for g in sorted(stacks.skipped):
                self.stdout.write(self.style.WARNING(f'  ⚠ Cohort {g} has no stacked estimates: {stacks.skipped[g]}'))

        payload = {'pooled': {str(j): a for j, a in sorted(pooled.items())}}
        try:
            implied = implied_estimand(table, catt, provenance=options['catt'])
            payload.update(implied=implied.to_dict(), missing=[])
        except CoverageError as exc:
            payload.update(implied=None, missing=[{'g': g, 'ell': ell} for g, ell in exc.missing])
            self.stdout.write(self.style.WARNING(f'  ⚠ Implied estimand not identified: {exc}'))
        write_outputs(out, 'implied_estimand', formats, payload)
        self.echo_config(out, resolved)

        for check in report.checks:
            mark = '✓' if check.passed else '✗'
            style = self.style.SUCCESS if check.passed else self.style.WARNING
            self.stdout.write(style(f'  {mark} {check.name}: max deviation {check.max_deviation:.2e} {check.detail}'.rstrip()))
        for g, j, w in report.negative_own_weights:
            self.stdout.write(self.style.WARNING(f'  ⚠ Negative own-period weight for cohort {g} at j={j}: {w:.4f}'))
        self.stdout.write(self.style.SUCCESS(f'✓ Decomposition written to {out}'))
