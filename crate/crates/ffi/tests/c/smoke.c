#include <stdio.h>
#include <string.h>
#include "pmlm.h"

#define CHECK(call)                                                        \
    do {                                                                   \
        PmlmStatus s_ = (call);                                            \
        if (s_ != PMLM_STATUS_OK) {                                        \
            fprintf(stderr, "%s -> %d: %s\n", #call, (int)s_,              \
                    pmlm_last_error_message());                            \
            return 1;                                                      \
        }                                                                  \
    } while (0)

int main(void) {
    PmlmModel *model = NULL;
    CHECK(pmlm_model_new(pmlm_model_config_tiny(20), 3, &model));

    uint32_t s1[] = {11, 12, 13, 14, 15, 16};
    size_t positions[] = {4, 5, 2};
    size_t step_lens[] = {2, 1};
    PmlmInstance *inst = NULL;
    CHECK(pmlm_instance_assemble(s1, 6, NULL, 0, positions, step_lens, 2, 16, &inst));

    size_t violations = 99;
    CHECK(pmlm_instance_audit(inst, &violations));
    size_t rows = 0, len = 0;
    PmlmStatus s = pmlm_model_target_logits(model, inst, NULL, 0, &len, &rows);
    if (s != PMLM_STATUS_BUFFER_TOO_SMALL || rows != 6 || len != 6 * 20) {
        fprintf(stderr, "size query: status %d rows %zu len %zu\n", (int)s, rows, len);
        return 1;
    }
    float logits[120];
    CHECK(pmlm_model_target_logits(model, inst, logits, 120, &len, &rows));

    size_t bad[] = {0};
    size_t one[] = {1};
    PmlmInstance *nope = NULL;
    if (pmlm_instance_assemble(s1, 6, NULL, 0, bad, one, 1, 16, &nope) == PMLM_STATUS_OK
        || strlen(pmlm_last_error_message()) == 0) {
        fprintf(stderr, "special position accepted\n");
        return 1;
    }

    printf("version=%s rows=%zu violations=%zu n=%zu\n", pmlm_version(), rows, violations,
           pmlm_instance_len(inst));
    pmlm_instance_free(inst);
    pmlm_model_free(model);
    return 0;
}
