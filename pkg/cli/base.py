"""
Shared plumbing for the ddd_* management commands: common flags, config
resolution, panel loading and exit-code mapping.

Exit codes: 0 success, 1 domain or validation error, 2 I/O error.
"""
import logging

from django.core.exceptions import ValidationError
from django.core.management.base import BaseCommand, CommandError

from panel.datasets import load_panel
from stacked_ddd.exceptions import DDDError

from .export_utils import write_resolved_config
from .forms import build_run_config

logger = logging.getLogger(__name__)

EXIT_DOMAIN = 1
EXIT_IO = 2


class DDDCommand(BaseCommand):
    """BaseCommand that turns library failures into exit codes."""

    def add_input_arguments(self, parser):
        parser.add_argument('--input', help='Panel CSV (long format, one row per unit and period)')
        parser.add_argument('--schema', help='JSON file mapping logical columns to CSV headers')

    def add_window_arguments(self, parser):
        parser.add_argument('--L', type=int, dest='L', help='Pre-periods in the event window')
        parser.add_argument('--K', type=int, dest='K', help='Post-periods in the event window')

    def add_output_arguments(self, parser):
        parser.add_argument('--out', help='Output directory (default: current directory)')
        parser.add_argument('--format', dest='formats', help='Comma-separated output formats: json,csv')
        parser.add_argument('--config', help='JSON config file; explicit flags take precedence')

    def resolve(self, options):
        return build_run_config(options, options.get('config'))

    def load(self, config):
        resolved = config.resolved()
        path = resolved.get('input')
        if not path:
            raise CommandError('--input is required', returncode=EXIT_DOMAIN)
        ds = load_panel(path, schema=resolved['schema_columns'], never_token=resolved['never_token'],
                        delimiter=resolved['delimiter'])
        self.stdout.write(f'Loaded {ds.n_units:,} units over periods {ds.t_min}..{ds.t_max}')
        return ds

    def echo_config(self, out_dir, resolved):
        write_resolved_config(out_dir, resolved)

    def run(self, options):
        raise NotImplementedError

    def handle(self, *args, **options):
        try:
            self.run(options)
        except CommandError:
            raise
        except ValidationError as exc:
            raise CommandError(f'Invalid configuration: {"; ".join(exc.messages)}', returncode=EXIT_DOMAIN) from exc
        except DDDError as exc:
            raise CommandError(str(exc), returncode=EXIT_DOMAIN) from exc
        except OSError as exc:
            raise CommandError(f'I/O error: {exc}', returncode=EXIT_IO) from exc
        except Exception:
            logger.error(f'Unexpected failure in {self.__class__.__module__}', exc_info=True)
            raise
