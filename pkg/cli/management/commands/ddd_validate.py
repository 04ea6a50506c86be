"""
Management command to check a panel's cohort/eligibility cells before estimation.
The validation report is written whether or not the panel passes.

Usage:
    python manage.py ddd_validate --input panel.csv --out results/
    python manage.py ddd_validate --input panel.csv --schema schema.json --format json
"""
import pandas as pd
from django.core.management.base import CommandError

from cli.base import EXIT_DOMAIN, DDDCommand
from cli.export_utils import write_outputs
from panel.validators import validate_panel


class Command(DDDCommand):
    help = 'Validate a DDD panel: cell counts, overlap and cohort labeling'

    def add_arguments(self, parser):
        self.add_input_arguments(parser)
        self.add_output_arguments(parser)

    def run(self, options):
        config = self.resolve(options)
        resolved = config.resolved()
        ds = self.load(config)
        report = validate_panel(ds)

        out = resolved['out']
        frame = pd.DataFrame(report.to_dict()['cell_counts'], columns=['cohort', 'eligible', 'count'])
        write_outputs(out, 'validation_report', resolved['formats'], report.to_dict(), frame)
        self.echo_config(out, resolved)

        self.stdout.write(f'Cells checked: {len(report.cell_counts)}')
        for violation in report.violations:
            self.stdout.write(self.style.WARNING(f'  ⚠ {violation.message}'))

        if not report.ok:
            raise CommandError(
                f'Panel failed validation with {len(report.violations)} violation(s)',
                returncode=EXIT_DOMAIN,
            )
        self.stdout.write(self.style.SUCCESS('✓ Panel passed validation'))
