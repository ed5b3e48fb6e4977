# Dataset ingestion and synthetic generators
