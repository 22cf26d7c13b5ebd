from .translator import Translator, translator

__all__ = ["Translator", "translator"]
