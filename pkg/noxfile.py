"""Test against the supported Python and pydantic matrix"""

import nox

python_versions = ["3.10", "3.11", "3.12"]
pydantic_versions = [">=2,<2.6", ">=2.6"]


@nox.session(python=python_versions)
@nox.parametrize("pydantic", pydantic_versions)
def tests(session: nox.Session, pydantic: str):
    """Run py.test against the supported matrix"""
    session.install("-r", "requirements-dev.txt")
    session.install(".")
    session.install(f"pydantic{pydantic}")
    session.run("pytest", "--verbose", "-n", "auto")


@nox.session(python=python_versions[-1])
def experiment(session: nox.Session):
    """Desk-scale training trends on synthetic phantoms"""
    session.install("-r", "requirements-dev.txt")
    session.install(".")
    session.run("pytest", "--verbose", "-m", "slow", env={"DDREG_SLOW_TESTS": "1"})
