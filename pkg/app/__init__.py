# FastAPI surface for the knowledge injection laboratory
