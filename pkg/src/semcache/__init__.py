"""User-side semantic cache for LLM web services."""
