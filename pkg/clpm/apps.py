from django.apps import AppConfig


class ClpmConfig(AppConfig):
    name = 'clpm'
    verbose_name = 'Continuous latent position model'
