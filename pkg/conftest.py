# Lets `pytest tests` import tinymr from a source checkout.
