from .seeding import seed_stream

__all__ = ["seed_stream"]
