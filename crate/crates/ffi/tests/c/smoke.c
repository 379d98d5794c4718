#include <stdio.h>
#include <string.h>
#include "sac.h"

int main(void) {
    double d[] = {0.4, 0.25, 0.3};
    double t = 0.0;
    SacModel *m = NULL;
    if (sac_threshold_worst_irrelevant(d, 3, &t) != SAC_STATUS_OK || t != 0.25) return 1;
    if (sac_model_load(NULL, &m) != SAC_STATUS_NULL_ARGUMENT || m != NULL) return 2;
    if (sac_last_error() == NULL) return 3;
    if (sac_is_stolen(0.25, t) != 1) return 4;
    printf("%s\n", sac_version());
    return 0;
}
