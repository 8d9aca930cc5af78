import logging
import os

import jinja2

from editflow.schemas.record_schemas import VerifyReport

logger = logging.getLogger(__name__)


def write_file(file_path: str, content: str) -> None:
    parent = os.path.dirname(file_path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(file_path, "w", encoding="utf-8") as f:
        f.write(content)


def format_value(value) -> str:
    if value is None:
        return "-"
    if value == 0 or 1e-3 <= abs(value) < 1e4:
        return f"{value:.6g}"
    return f"{value:.3e}"


def render_verify_report(report: VerifyReport, template_name: str = "verify_report.txt.jinja") -> str:
    module_dir = os.path.dirname(__file__)
    templates_path = os.path.join(os.path.dirname(module_dir), "templates")
    env = jinja2.Environment(
        loader=jinja2.FileSystemLoader(templates_path),
        trim_blocks=True,
        lstrip_blocks=True,
        keep_trailing_newline=True,
        autoescape=False,
        undefined=jinja2.StrictUndefined,
    )
    env.filters["num"] = format_value
    template = env.get_template(template_name)
    return template.render(report=report, suites=report.suites, passed=report.passed)


def write_verify_report(report: VerifyReport, dst_path: str) -> str:
    """Render the text report and write it next to its JSON twin."""
    text = render_verify_report(report)
    write_file(dst_path, text)
    write_file(os.path.splitext(dst_path)[0] + ".json", report.model_dump_json(indent=2))
    logger.info("Verifier report written to %s", dst_path)
    return dst_path
