"""
Management command to draw synthetic DDD panels and run Monte Carlo experiments.

With --reps 0 only the panel is written; otherwise the Monte Carlo summary
is written (and the first panel too when --write-panel is given).

Usage:
    python manage.py ddd_simulate --dgp dgp.json --reps 0 --out sim/
    python manage.py ddd_simulate --dgp dgp.json --reps 500 --estimators stacked:cohort,pooled_3wfe:hw_style
"""
import os

from django.core.management.base import CommandError

from cli.base import EXIT_DOMAIN, DDDCommand
from cli.export_utils import ensure_dir, write_outputs, write_resolved_config
from cli.forms import read_config_file
from simulation.dgp import simulate_panel
from simulation.forms import load_dgp_config
from simulation.montecarlo import EstimatorSpec, monte_carlo


class Command(DDDCommand):
    help = 'Simulate DDD panels and run Monte Carlo experiments'

    def add_arguments(self, parser):
        parser.add_argument('--dgp', help='DGP config JSON file')
        parser.add_argument('--seed', type=int, help='Master seed (overrides the DGP file)')
        parser.add_argument('--reps', type=int, help='Monte Carlo replications (default: 0, panel only)')
        parser.add_argument(
            '--estimators',
            help='Comma-separated estimator specs (default stacked:cohort), e.g. stacked:fwl,pooled_3wfe:hw_style',
        )
        parser.add_argument('--write-panel', action='store_true', help='Also write the panel drawn from the seed')
        parser.add_argument('--n-jobs', type=int, dest='n_jobs', help='Parallel replications')
        parser.add_argument('--alpha', type=float, help='CI level for coverage (default 0.05)')
        self.add_window_arguments(parser)
        self.add_output_arguments(parser)

    def run(self, options):
        resolved = dict(self.resolve(options).cleaned_data)
        settings_from_file = read_config_file(options.get('config'))

        dgp_path = options.get('dgp') or settings_from_file.get('dgp')
        dgp_data = settings_from_file.get('dgp_config') if not dgp_path else None
        if not dgp_path and dgp_data is None:
            raise CommandError('--dgp is required', returncode=EXIT_DOMAIN)
        reps = options['reps'] if options['reps'] is not None else int(settings_from_file.get('reps', 0))
        if reps < 0:
            raise CommandError('--reps must be >= 0', returncode=EXIT_DOMAIN)
        estimators = [item for item in (options['estimators'] or settings_from_file.get('estimators') or 'stacked:cohort').split(',') if item]

        seed = options.get('seed')
        cfg = load_dgp_config(dgp_path, dgp_data, seed=seed)
        out, formats = resolved['out'], resolved['formats']

        resolved.update({
            'dgp': dgp_path,
            'dgp_config': cfg.to_dict(),
            'reps': reps,
            'estimators': ','.join(estimators),
        })

        if reps == 0 or options['write_panel']:
            ds = simulate_panel(cfg)
            path = os.path.join(ensure_dir(out), 'panel.csv')
            ds.to_csv(path)
            self.stdout.write(f'  Panel: {ds.n_units:,} units -> {path}')

        if reps > 0:
            specs = [EstimatorSpec.parse(item) for item in estimators]
            summary = monte_carlo(
                cfg,
                specs,
                reps=reps,
                window=(resolved['L'], resolved['K']),
                alpha=resolved['alpha'],
                n_jobs=resolved['n_jobs'],
            )
            write_outputs(out, 'mc_summary', formats, summary.to_dict(), summary.to_frame())
            for name, count in summary.failures.items():
                self.stdout.write(self.style.WARNING(f'  ⚠ {name}: {count} failed replication(s)'))
            self.stdout.write(f'  Monte Carlo: {reps} replication(s), {len(specs)} estimator(s)')

        write_resolved_config(out, resolved)
        self.stdout.write(self.style.SUCCESS(f'✓ Simulation outputs in {out}'))
