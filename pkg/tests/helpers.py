from pathlib import Path

from cp_lang.assembler import assemble_or_raise
from workloads.runtime import together

ROOT = Path(__file__).resolve().parents[1]
SCENARIOS = ROOT / "scenarios"

BUSY_LOOP = """
loop:   ADDI r1, r1, 1
        BR loop
"""


def start_programs(app, handles, source, params=()):
    """Upload one program to every handle, then start them all at once."""
    image = assemble_or_raise(source)
    for handle in handles:
        yield from app.load_program(handle, image)
    yield from together(app, *(app.start(handle, params) for handle in handles))
