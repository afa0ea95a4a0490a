"""Registry of card profiles and signing programs.

Built-in documents ship inside the package under ``cps/data``; additional
documents load from directories (``*.profile`` / ``*.program`` files).
When a program's target profile is known its reference PIN is bound into
the program so PIN placeholders match exactly.
"""

from __future__ import annotations

from dataclasses import replace
from importlib import resources
from pathlib import Path

from .card import CardProfile, load_profile
from .programs import StraightLineProgram, load_program


class UnknownProfileError(KeyError):
    pass


class UnknownProgramError(KeyError):
    pass


class Library:
    def __init__(self) -> None:
        self.profiles: dict[str, CardProfile] = {}
        self.programs: dict[str, StraightLineProgram] = {}

    @classmethod
    def with_builtins(cls) -> "Library":
        lib = cls()
        data = resources.files("cps").joinpath("data")
        for entry in sorted(data.joinpath("profiles").iterdir(), key=lambda e: e.name):
            if entry.name.endswith(".profile"):
                lib.add_profile(load_profile(entry.read_text()))
        for entry in sorted(data.joinpath("programs").iterdir(), key=lambda e: e.name):
            if entry.name.endswith(".program"):
                lib.add_program(load_program(entry.read_text()))
        return lib

    def add_profile(self, profile: CardProfile) -> CardProfile:
        self.profiles[profile.profile_id] = profile
        # Late PIN binding for programs that arrived before their profile.
        for program_id, program in list(self.programs.items()):
            if program.card_profile_id == profile.profile_id and program.pin is None:
                self.programs[program_id] = replace(program, pin=profile.pin)
        return profile

    def add_program(self, program: StraightLineProgram) -> StraightLineProgram:
        profile = self.profiles.get(program.card_profile_id)
        if profile is not None and program.pin is None:
            program = replace(program, pin=profile.pin)
        self.programs[program.program_id] = program
        return program

    def load_directory(self, path: str | Path) -> None:
        path = Path(path)
        for entry in sorted(path.glob("*.profile")):
            self.add_profile(load_profile(entry.read_text()))
        for entry in sorted(path.glob("*.program")):
            self.add_program(load_program(entry.read_text()))

    def profile(self, profile_id: str) -> CardProfile:
        try:
            return self.profiles[profile_id]
        except KeyError:
            raise UnknownProfileError(profile_id) from None

    def program(self, program_id: str) -> StraightLineProgram:
        try:
            return self.programs[program_id]
        except KeyError:
            raise UnknownProgramError(program_id) from None

    def sequence_text(self, name: str) -> str:
        """Text of a packaged sequence file, e.g. ``fig2``."""
        return (
            resources.files("cps").joinpath("data", "sequences", f"{name}.seq").read_text()
        )
