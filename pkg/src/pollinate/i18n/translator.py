import json
import logging
import os
from pathlib import Path
from typing import Any

logger = logging.getLogger(__name__)


class Translator:
    """Message catalogue for command-line output."""

    def __init__(self, translations_dir: Path | None = None):
        self.translations: dict[str, dict[str, Any]] = {}
        self.default_language = "en"
        self.translations_dir = translations_dir or Path(__file__).parent / "translations"
        self.supported_languages = sorted(p.stem for p in self.translations_dir.glob("*.json"))
        self._load_translations()

    def _load_translations(self):
        """Load all translation files."""
        for lang in self.supported_languages:
            translation_file = self.translations_dir / f"{lang}.json"
            try:
                with open(translation_file, encoding="utf-8") as f:
                    self.translations[lang] = json.load(f)
            except (json.JSONDecodeError, FileNotFoundError) as e:
                self.translations[lang] = {}
                logger.error(f"Error loading translation file {lang}.json: {e}")

    @property
    def language(self) -> str:
        """Language from POLLINATE_LANG, falling back to the default."""
        language = os.getenv("POLLINATE_LANG", self.default_language)
        return language if language in self.supported_languages else self.default_language

    def get(self, key: str, language: str | None = None, **kwargs) -> str:
        """
        Get translated text by key.

        Args:
            key: Translation key in dot notation (e.g., 'errors.exit')
            language: Language code. Uses POLLINATE_LANG or the default if None.
            **kwargs: Format parameters for the translation string

        Returns:
            Translated and formatted string; the key itself when missing
        """
        if language is None or language not in self.supported_languages:
            language = self.language

        translation = self._get_nested_value(self.translations.get(language, {}), key)
        if translation is None and language != self.default_language:
            translation = self._get_nested_value(
                self.translations.get(self.default_language, {}), key
            )
        if translation is None:
            translation = key

        try:
            return translation.format(**kwargs)
        except (KeyError, ValueError, IndexError):
            return translation

    def _get_nested_value(self, data: dict[str, Any], key: str) -> str | None:
        current = data
        for k in key.split("."):
            if isinstance(current, dict) and k in current:
                current = current[k]
            else:
                return None
        return current if isinstance(current, str) else None

    def is_supported_language(self, language_code: str) -> bool:
        return language_code in self.supported_languages


# Global translator instance
translator = Translator()
