"""Voice conversion by analogy embeddings over constant-Q spectrograms,
trained adversarially against a class-conditional discriminator."""

__version__ = "0.1.0"
