"""Exception hierarchy. ``code`` names map onto CLI exit statuses."""

EXIT_CODES = {
    "ConfigError": 2,
    "AssetMissing": 3,
    "BackendFailure": 4,
    "ValidationFailure": 5,
}


class ArmorError(Exception):
    code = "ValidationFailure"

    @property
    def exit_code(self) -> int:
        return EXIT_CODES.get(self.code, 1)


class ConfigError(ArmorError):
    code = "ConfigError"


class AssetMissing(ArmorError):
    code = "AssetMissing"

    def __init__(self, path, what: str = "asset"):
        super().__init__(f"{what} not found: {path}")
        self.path = str(path)
