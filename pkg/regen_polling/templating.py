"""
Jinja2 Template Configuration

Centralized template loader for the plain-text summaries written next to
the JSON results. Pipelines import `templates` and render by name.
"""

from pathlib import Path

from jinja2 import Environment, FileSystemLoader, StrictUndefined

from regen_polling.utils.text import format_interval


# Global environment pointing to the package's templates directory
templates = Environment(
    loader=FileSystemLoader(Path(__file__).parent / "templates"),
    undefined=StrictUndefined,
    keep_trailing_newline=True,
    trim_blocks=True,
    lstrip_blocks=True,
)
templates.filters["interval"] = lambda pair: format_interval(*pair)


def render(name: str, **context) -> str:
    return templates.get_template(name).render(**context)
