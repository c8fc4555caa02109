"""Small hand-built models with known geometry."""

from importlib import resources

from .cad_lang import BooleanOp, CadSequence, circle, eos, ext, line, parse_sequence, sol


def square(half):
    return [line(half, -half), line(half, half), line(-half, half), line(-half, -half)]


def cube():
    """Unit square extruded from -0.5 to 0.5: the axis-aligned unit cube."""
    return CadSequence((sol(), *square(0.5), ext(0.5, -0.5), eos()))


def cylinder(radius=0.5, height=1.0):
    """Circle about the origin extruded symmetrically to total ``height``."""
    return CadSequence((sol(), circle(0.0, 0.0, radius), ext(0.5 * height, -0.5 * height), eos()))


def cut_block(outer=0.8, inner=0.3, height=1.0):
    """Square block with a smaller square through-hole cut by a second body."""
    e = 0.5 * height
    return CadSequence((
        sol(), *square(outer), ext(e, -e),
        sol(), *square(inner), ext(e, -e, b=BooleanOp.CUT),
        eos(),
    ))


def bundled(name):
    """Parse one of the JSON sequences shipped in ``p2cad/data``."""
    text = resources.files("p2cad").joinpath("data", f"{name}.json").read_text()
    return parse_sequence(text)
