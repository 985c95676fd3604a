import sys

import click

from src.services.beamformer import write_beampattern_csv
from src.services.metrics import RANK_BY_IMPROVEMENT, RANK_BY_INPUT
from src.services.pipeline_service import DEFAULT_SYSTEMS, EXTRA_SYSTEMS, PipelineService
from src.services.training import INPUT_BEAMS, INPUT_KINDS
from src.utils.config import PipelineConfig
from src.utils.errors import BeamsepError
from src.utils.logger import get_logger

logger = get_logger("cli")

USAGE_EXIT_CODE = 1


class BeamsepGroup(click.Group):
    """Maps usage errors to exit code 1 and pipeline errors to their own codes."""

    def main(self, *args, standalone_mode: bool = True, **kwargs):
        try:
            rv = super().main(*args, standalone_mode=False, **kwargs)
            code = rv if isinstance(rv, int) else 0
        except click.ClickException as e:
            e.show()
            code = USAGE_EXIT_CODE
        except click.exceptions.Abort:
            click.echo("Aborted!", err=True)
            code = USAGE_EXIT_CODE
        except BeamsepError as e:
            logger.error(str(e))
            code = e.exit_code
        if standalone_mode:
            sys.exit(code)
        return code


@click.group(cls=BeamsepGroup)
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
              help="JSON pipeline config; defaults are used when omitted.")
@click.option("--set", "overrides", multiple=True, metavar="SECTION.KEY=VALUE",
              help="Override one config value, e.g. --set training.steps=50.")
@click.option("--no-registry", is_flag=True, help="Do not record runs in the database.")
@click.pass_context
def cli(ctx, config_path, overrides, no_registry):
    """Multi-beam speech separation toolkit"""
    config = PipelineConfig.load(config_path, overrides)
    ctx.obj = PipelineService(config, registry=not no_registry)


@cli.command("gen-corpus")
@click.pass_obj
def gen_corpus(service: PipelineService):
    """Simulate reverberant multi-speaker mixtures and write the manifest."""
    click.echo(str(service.gen_corpus()))


@cli.command("design-beams")
@click.pass_obj
def design_beams(service: PipelineService):
    """Design the fixed beamformer bank and its beampattern CSV."""
    click.echo(str(service.design_beams()))


@cli.command("beampattern")
@click.option("--beam", "beams", type=int, multiple=True, help="Beam index (repeatable); all beams by default.")
@click.option("--freq", "freqs", type=float, multiple=True, required=True, help="Frequency in Hz (repeatable).")
@click.option("--step", type=float, default=1.0, show_default=True, help="Angle step in degrees.")
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True)
@click.pass_obj
def beampattern(service: PipelineService, beams, freqs, step, out_path):
    """Write angle-to-gain CSV rows for the designed bank."""
    bank = service.load_bank()
    write_beampattern_csv(bank, out_path, list(beams) or list(range(bank.num_beams)), list(freqs), step)
    click.echo(out_path)


@cli.command("train")
@click.option("--input", "input_kind", type=click.Choice(INPUT_KINDS), default=INPUT_BEAMS, show_default=True,
              help="Train on the beam outputs, or on the reference microphone for the 'dan' baseline.")
@click.pass_obj
def train(service: PipelineService, input_kind):
    """Train the embedding network on the corpus."""
    click.echo(str(service.train(input_kind)))


@cli.command("separate")
@click.argument("mixture", type=click.Path(exists=True, dir_okay=False))
@click.option("--out-dir", type=click.Path(file_okay=False), default=None,
              help="Output folder; defaults to paths.separate_dir.")
@click.option("--speakers", type=int, default=None, help="Number of speakers; defaults to corpus.num_speakers.")
@click.option("--oracle-select", is_flag=True, help="Pick outputs with the ref_<c>.wav files next to MIXTURE.")
@click.pass_obj
def separate(service: PipelineService, mixture, out_dir, speakers, oracle_select):
    """Separate one multichannel mixture WAV."""
    out_dir = out_dir or str(service.config.resolve("separate_dir"))
    report = service.separate(mixture, out_dir, speakers, oracle_select)
    click.echo(f"{report.method}: chosen {report.chosen_provenance()}")


@cli.command("evaluate")
@click.option("--systems", default=",".join(DEFAULT_SYSTEMS), show_default=True,
              help=f"Comma-separated systems out of {', '.join(DEFAULT_SYSTEMS + EXTRA_SYSTEMS)}.")
@click.option("--corpus", "corpus_dir", type=click.Path(exists=True, file_okay=False), default=None,
              help="Held-out corpus folder; defaults to the configured corpus.")
@click.option("--rank-by", type=click.Choice([RANK_BY_IMPROVEMENT, RANK_BY_INPUT]), default=RANK_BY_IMPROVEMENT,
              show_default=True, help="Speaker ordering for the summary's top-k columns.")
@click.pass_obj
def evaluate(service: PipelineService, systems, corpus_dir, rank_by):
    """Score every system on the corpus and write the SDR tables."""
    names = [s.strip() for s in systems.split(",") if s.strip()]
    if not names:
        raise click.BadParameter("at least one system is required", param_hint="--systems")
    for kind, path in service.evaluate(names, corpus_dir, rank_by).items():
        click.echo(f"{kind}: {path}")


if __name__ == '__main__':
    cli()
